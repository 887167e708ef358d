#include "helpers.hpp"

#include "sfid/baselines.hpp"
#include "sfid/errors.hpp"
#include "sfid/synthlab.hpp"

#include <doctest.h>

#include <cmath>

using namespace sfid;

namespace {

ResidualModel zero_residual(Index dim) {
  ResidualModel m;
  m.classifier_weights = MatrixD::Zero(2, dim);
  m.classifier_bias = VectorD::Zero(2);
  m.residual_weights = MatrixD::Zero(dim, dim);
  m.residual_bias = VectorD::Zero(dim);
  return m;
}

synth::SynthData biased(Index n, Index dim, std::uint64_t seed) {
  synth::SynthConfig cfg;
  cfg.n_samples = n;
  cfg.dim = dim;
  cfg.n_classes = 4;
  cfg.bias_dims = synth::pick_bias_dims(dim, 4, seed);
  cfg.bias_strength = 2.0;
  cfg.seed = seed;
  return synth::gen_synthetic(cfg);
}

}  // namespace

TEST_CASE("equal-frequency bins keep ties together") {
  const std::vector<float> v{3, 1, 2, 2, 5, 4};
  CHECK(equal_frequency_bins(v, 3) == std::vector<int>{1, 0, 0, 0, 2, 2});
  const std::vector<float> flat(10, 1.0f);
  CHECK(equal_frequency_bins(flat, 4) == std::vector<int>(10, 0));
}

TEST_CASE("mutual information of a copied balanced attribute is ln 2") {
  const std::vector<int> x{0, 1, 0, 1, 1, 0}, y{0, 1, 0, 1, 1, 0};
  CHECK(plugin_mutual_information(x, 2, y, 2) == doctest::Approx(std::log(2.0)));
  MatrixF z(1000, 2);
  std::vector<int> labels(1000);
  for (Index i = 0; i < 1000; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(i % 2);
    z(i, 0) = static_cast<float>(i % 2);
    z(i, 1) = 7.0f;
  }
  const auto mi = mutual_info_features(EmbeddingMatrix(z), sfid::test::binary_table(labels), 16);
  CHECK(mi[0] == doctest::Approx(std::log(2.0)));
  CHECK(mi[1] == 0.0);
}

TEST_CASE("independent features carry almost no mutual information") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const EmbeddingMatrix z(sfid::test::random_matrix(10000, 3, seed));
    std::mt19937_64 rng(seed + 50);
    std::vector<int> y(10000);
    for (auto& v : y) v = static_cast<int>(rng() & 1);
    const auto mi = mutual_info_features(z, sfid::test::binary_table(y), 64);
    CHECK(mi.maxCoeff() <= 0.02);
    CHECK(mi.minCoeff() >= 0.0);
  }
}

TEST_CASE("mutual information rejects bad bin counts") {
  const EmbeddingMatrix z(sfid::test::random_matrix(10, 2, 1));
  const auto y = sfid::test::binary_table({0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
  CHECK_THROWS_AS(mutual_info_features(z, y, 1), ConfigError);
  CHECK_THROWS_AS(mutual_info_features(z, y, 11), DataError);
}

TEST_CASE("clipclip zeroes or drops the most informative columns") {
  synth::SynthConfig cfg;
  cfg.n_samples = 2000;
  cfg.dim = 512;
  cfg.n_classes = 4;
  cfg.bias_dims = {137};
  cfg.seed = 3;
  const auto d = synth::gen_synthetic(cfg);
  const auto m = fit_clipclip(d.z, d.attributes, 60);
  CHECK(m.k == 60);
  CHECK(std::find(m.indices.begin(), m.indices.end(), 137) != m.indices.end());
  const auto out = apply_debias(m, d.z);
  CHECK(out.n_features() == 512);
  for (Index j : m.indices) CHECK(out.data.col(j).isZero());
  CHECK(fit_clipclip(d.z, d.attributes, 1).indices == std::vector<Index>{137});
  CHECK(m.provenance["method"] == "clipclip");

  const EmbeddingMatrix small(sfid::test::random_matrix(20, 3, 4));
  std::vector<int> y(20);
  for (int i = 0; i < 20; ++i) y[static_cast<std::size_t>(i)] = i % 2;
  const auto dropped = fit_clipclip(small, sfid::test::binary_table(y), 1, ClipImpute::DROP, 4);
  CHECK(apply_debias(dropped, small).n_features() == 2);
  CHECK_THROWS_AS(fit_clipclip(small, sfid::test::binary_table(y), 3, ClipImpute::ZERO, 4), ConfigError);
}

TEST_CASE("composite loss gradients match central differences") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0, 1);
  const Index dim = 4;
  MatrixD z(5, dim), wc(2, dim), wa(dim, dim);
  VectorD bc(2), ba(dim);
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  for (Index i = 0; i < wc.size(); ++i) wc.data()[i] = n(rng);
  for (Index i = 0; i < wa.size(); ++i) wa.data()[i] = 0.3 * n(rng);
  for (Index i = 0; i < 2; ++i) bc(i) = n(rng);
  for (Index i = 0; i < dim; ++i) ba(i) = 0.3 * n(rng);
  const std::vector<int> y{0, 1, 1, 0, 1};
  const DearLambdas lam{0.7, 1.3, 0.9};
  MatrixD gw;
  VectorD gb;
  dear_objective(z, y, wc, bc, wa, ba, lam, &gw, &gb);
  const double h = 1e-6;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-8, std::max(std::abs(a), std::abs(b))); };
  for (Index i = 0; i < wa.size(); ++i) {
    MatrixD p = wa, m = wa;
    p.data()[i] += h;
    m.data()[i] -= h;
    const double fd = (dear_objective(z, y, wc, bc, p, ba, lam).total - dear_objective(z, y, wc, bc, m, ba, lam).total) / (2 * h);
    CHECK(rel(fd, gw.data()[i]) < 1e-4);
  }
  for (Index i = 0; i < dim; ++i) {
    VectorD p = ba, m = ba;
    p(i) += h;
    m(i) -= h;
    const double fd = (dear_objective(z, y, wc, bc, wa, p, lam).total - dear_objective(z, y, wc, bc, wa, m, lam).total) / (2 * h);
    CHECK(rel(fd, gb(i)) < 1e-4);
  }
}

TEST_CASE("pure reconstruction weight leaves a near-zero residual") {
  const auto d = biased(400, 16, 2);
  const auto m = fit_dear(d.z, d.attributes, {1.0, 0.0, 0.0});
  const auto out = apply_dear(m, d.z);
  const double ratio = (out.data - d.z.data).cast<double>().norm() / d.z.data.cast<double>().norm();
  CHECK(ratio <= 0.05);
  CHECK(m.train_log.back() <= m.train_log.front());
}

TEST_CASE("default weights lower the attribute classifier's confidence") {
  const auto d = biased(400, 16, 3);
  DearTraining t;
  t.step_size = 0.05;
  const auto m = fit_dear(d.z, d.attributes, {}, t);
  const auto mean_conf = [&](const EmbeddingMatrix& z) {
    return classifier_proba(z.data.cast<double>(), m.classifier_weights, m.classifier_bias).rowwise().maxCoeff().mean();
  };
  CHECK(mean_conf(apply_dear(m, d.z)) < mean_conf(d.z));
  CHECK(m.train_log.back() <= m.train_log.front());
  CHECK(residual_model_to_json(fit_dear(d.z, d.attributes, {}, t)) == residual_model_to_json(m));
}

TEST_CASE("residual application is affine") {
  auto m = zero_residual(3);
  const EmbeddingMatrix z(sfid::test::random_matrix(6, 3, 5));
  CHECK(apply_dear(m, z).data == z.data);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  for (Index i = 0; i < 9; ++i) m.residual_weights.data()[i] = n(rng);
  for (Index i = 0; i < 3; ++i) m.residual_bias(i) = n(rng);
  const EmbeddingMatrix z2(sfid::test::random_matrix(6, 3, 7));
  const double a = 0.3, b = -1.7;
  const EmbeddingMatrix mix(MatrixF(a * z.data + b * z2.data));
  // res(x) = out(x) - x is affine: res(a x + b y) = a res(x) + b res(y) + (1 - a - b) bias.
  const MatrixD r1 = (apply_dear(m, z).data - z.data).cast<double>();
  const MatrixD r2 = (apply_dear(m, z2).data - z2.data).cast<double>();
  const MatrixD rm = (apply_dear(m, mix).data - mix.data).cast<double>();
  MatrixD want = a * r1 + b * r2;
  want.rowwise() += (1 - a - b) * m.residual_bias.transpose();
  CHECK(rm.isApprox(want, 1e-5));
  CHECK_THROWS_AS(apply_dear(m, EmbeddingMatrix(MatrixF::Zero(2, 4))), DataError);
}

TEST_CASE("dear rejects degenerate inputs and round trips through JSON") {
  const EmbeddingMatrix z(sfid::test::random_matrix(4, 3, 8));
  CHECK_THROWS_AS(fit_dear(z, sfid::test::binary_table({1, 1, 1, 1})), DataError);
  DearTraining t;
  t.epochs = 0;
  CHECK_THROWS_AS(fit_dear(z, sfid::test::binary_table({0, 1, 0, 1}), {}, t), ConfigError);
  t.epochs = 5;
  const auto m = fit_dear(z, sfid::test::binary_table({0, 1, 0, 1}), {}, t);
  sfid::test::TempDir dir;
  save_residual_model(m, dir / "dear.json");
  const auto back = load_residual_model(dir / "dear.json");
  CHECK(back.residual_weights == m.residual_weights);
  CHECK(back.classifier_bias == m.classifier_bias);
  CHECK(back.train_log == m.train_log);
}

TEST_CASE("divergent training is a TrainingError") {
  const auto d = biased(200, 8, 4);
  DearTraining t;
  t.step_size = 1e6;
  t.epochs = 50;
  CHECK_THROWS_AS(fit_dear(d.z, d.attributes, {}, t), TrainingError);
}
