#include "helpers.hpp"

#include "sfid/errors.hpp"
#include "sfid/imputation.hpp"
#include "sfid/synthlab.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace sfid;

namespace {

DebiasModel manual(Index dim, std::vector<Index> idx, std::vector<double> vals, ImputeMode mode = ImputeMode::LC) {
  DebiasModel m;
  m.mode = mode;
  m.k = static_cast<Index>(idx.size());
  m.tau = 0.7;
  m.source_dim = dim;
  m.indices = std::move(idx);
  m.values = std::move(vals);
  return m;
}

struct Planted {
  synth::SynthData train, val;
};

Planted planted(std::uint64_t seed) {
  synth::SynthConfig cfg;
  cfg.n_samples = 1600;
  cfg.dim = 64;
  cfg.bias_dims = synth::pick_bias_dims(64, 10, seed);
  cfg.seed = seed;
  const auto parts = synth::split_rows(synth::gen_synthetic(cfg), {1000, 600});
  return {parts[0], parts[1]};
}

SfidParams params(Index k = 50) {
  SfidParams p;
  p.k = k;
  p.forest.n_trees = 40;
  p.forest.seed = 9;
  p.fallback_quantile = 0.05;
  return p;
}

}  // namespace

TEST_CASE("selected columns are overwritten with their values") {
  MatrixF z(2, 2);
  z << 1, 2, 5, 6;
  const auto out = apply_debias(manual(2, {0}, {3.0}), EmbeddingMatrix(z));
  MatrixF want(2, 2);
  want << 3, 2, 3, 6;
  CHECK(out.data == want);
}

TEST_CASE("k = 0 is the identity and dimension mismatches are DataErrors") {
  const EmbeddingMatrix z(sfid::test::random_matrix(7, 5, 1));
  CHECK(apply_debias(manual(5, {}, {}), z).data == z.data);
  CHECK_THROWS_AS(apply_debias(manual(4, {1}, {0.0}), z), DataError);
}

TEST_CASE("drop removes the selected columns") {
  const EmbeddingMatrix z(sfid::test::random_matrix(4, 3, 2));
  const auto out = apply_debias(manual(3, {1}, {0.0}, ImputeMode::DROP), z);
  REQUIRE(out.n_features() == 2);
  CHECK(out.data.col(0) == z.data.col(0));
  CHECK(out.data.col(1) == z.data.col(2));
}

TEST_CASE("gauss fills are seeded standard normal draws") {
  const EmbeddingMatrix z(MatrixF::Zero(4000, 3));
  auto m = manual(3, {0, 2}, {0.0, 0.0}, ImputeMode::GAUSS);
  m.noise_seed = 5;
  const auto a = apply_debias(m, z);
  CHECK(a.data == apply_debias(m, z).data);
  CHECK(apply_debias(m, z, 6).data != a.data);
  CHECK(a.data.col(1).isZero());
  for (Index j : {0, 2}) {
    const auto col = a.data.col(j).cast<double>();
    const double mean = col.mean();
    const double var = (col.array() - mean).square().mean();
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.08);
  }
  CHECK(a.data.col(0) != a.data.col(2));
}

TEST_CASE("top-k breaks ties toward the lower index") {
  VectorD s(5);
  s << 0.1, 0.3, 0.3, 0.0, 0.3;
  CHECK(top_k_indices(s, 2) == std::vector<Index>{1, 2});
  CHECK(top_k_indices(s, 0).empty());
  CHECK_THROWS_AS(top_k_indices(s, 6), ConfigError);
}

TEST_CASE("low-confidence set is inclusive and monotone in tau") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    VectorD c(50);
    for (Index i = 0; i < 50; ++i) c(i) = std::round(u(rng) * 20) / 20;
    const double t1 = std::round(u(rng) * 20) / 20, t2 = std::round(u(rng) * 20) / 20;
    const auto a = low_confidence_set(c, std::min(t1, t2));
    const auto b = low_confidence_set(c, std::max(t1, t2));
    CHECK(std::includes(b.begin(), b.end(), a.begin(), a.end()));
    for (Index i = 0; i < 50; ++i)
      CHECK((std::find(a.begin(), a.end(), i) != a.end()) == (c(i) <= std::min(t1, t2)));
  }
}

TEST_CASE("k = 50 on planted data selects every informative bias dimension") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto d = planted(seed);
    const auto fit = fit_sfid_detailed(d.train.z, d.train.attributes, d.val.z, params());
    CHECK(fit.model.indices.size() == 50);
    // u_B has random weights; a dim whose offset is far below the noise carries no signal.
    for (Index b : d.train.bias_dims) {
      if (5.0 * std::abs(d.train.attribute_directions(0, b)) < 0.5) continue;
      CHECK(std::binary_search(fit.model.indices.begin(), fit.model.indices.end(), b));
    }
  }
}

TEST_CASE("low-confidence means come from the confidence set") {
  const auto d = planted(4);
  const auto p = params(20);
  const auto fit = fit_sfid_detailed(d.train.z, d.train.attributes, d.val.z, p);
  REQUIRE_FALSE(fit.confidence_set.empty());
  for (std::size_t j = 0; j < fit.model.indices.size(); ++j) {
    const Index col = fit.model.indices[j];
    double sum = 0;
    for (Index r : fit.confidence_set) sum += d.val.z.data(r, col);
    CHECK(fit.model.values[j] == doctest::Approx(sum / static_cast<double>(fit.confidence_set.size())));
    CHECK(fit.model.values[j] >= d.val.z.data.col(col).minCoeff());
    CHECK(fit.model.values[j] <= d.val.z.data.col(col).maxCoeff());
  }
  const auto out = apply_debias(fit.model, d.val.z);
  CHECK(out.n_features() == d.val.z.n_features());
  CHECK(apply_debias(fit.model, out).data == out.data);
}

TEST_CASE("a fully confident validation set is an EmptyConfidenceSet") {
  MatrixF z = sfid::test::random_matrix(200, 6, 8) * 0.01f;
  std::vector<int> y(200);
  for (Index i = 0; i < 200; ++i) {
    y[static_cast<std::size_t>(i)] = i % 2;
    z.row(i).array() += 10.0f * static_cast<float>(i % 2);
  }
  const EmbeddingMatrix zz(z);
  auto p = params(2);
  p.fallback_quantile.reset();
  CHECK_THROWS_AS(fit_sfid(zz, sfid::test::binary_table(y), zz, p), EmptyConfidenceSet);
  try {
    fit_sfid(zz, sfid::test::binary_table(y), zz, p);
  } catch (const EmptyConfidenceSet& e) {
    CHECK(std::string(e.what()).find("minimum observed confidence 1") != std::string::npos);
  }
  p.fallback_quantile = 0.1;
  CHECK(fit_sfid_detailed(zz, sfid::test::binary_table(y), zz, p).confidence_set.size() == 20);
}

TEST_CASE("high-confidence mode keeps confidently predicted target samples") {
  const auto d = planted(5);
  auto p = params(20);
  p.mode = ImputeMode::HC;
  p.target_attribute = 1;
  const auto fit = fit_sfid_detailed(d.train.z, d.train.attributes, d.val.z, p);
  REQUIRE_FALSE(fit.confidence_set.empty());
  const auto proba = predict_proba(fit.forest, d.val.z);
  for (Index r : fit.confidence_set) {
    Index arg = 0;
    const double conf = proba.row(r).maxCoeff(&arg);
    CHECK(arg == 1);
    CHECK(conf >= 0.9);
  }
  const auto out = apply_debias(fit.model, d.val.z);
  CHECK(apply_debias(fit.model, out).data == out.data);
}

TEST_CASE("zero mode fills zeros and bad parameters are ConfigErrors") {
  const auto d = planted(6);
  auto p = params(10);
  p.mode = ImputeMode::ZERO;
  const auto m = fit_sfid(d.train.z, d.train.attributes, d.val.z, p);
  CHECK(std::all_of(m.values.begin(), m.values.end(), [](double v) { return v == 0.0; }));
  p.k = 64;
  CHECK_THROWS_AS(fit_sfid(d.train.z, d.train.attributes, d.val.z, p), ConfigError);
  p = params(10);
  p.tau = 0.4;
  CHECK_THROWS_AS(fit_sfid(d.train.z, d.train.attributes, d.val.z, p), ConfigError);
  p = params(10);
  p.mode = ImputeMode::HC;
  CHECK_THROWS_AS(fit_sfid(d.train.z, d.train.attributes, d.val.z, p), ConfigError);
  CHECK_THROWS_AS(parse_mode("median"), ConfigError);
}

TEST_CASE("reduce_to_2d averages over the non-channel axes") {
  EmbeddingTensor t(TensorLayout::NSC, {1, 2, 2});
  t.data = {1, 2, 3, 4};
  MatrixF want(1, 2);
  want << 2, 3;
  CHECK(reduce_to_2d(t).data == want);

  EmbeddingTensor img(TensorLayout::NCHW, {1, 1, 2, 2});
  img.data = {5, 5, 5, 5};
  CHECK(reduce_to_2d(img).data(0, 0) == 5.0f);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto layout : {TensorLayout::NSC, TensorLayout::NCHW}) {
    EmbeddingTensor r = layout == TensorLayout::NSC ? EmbeddingTensor(layout, {3, 4, 5})
                                                    : EmbeddingTensor(layout, {3, 5, 2, 2});
    for (auto& v : r.data) v = u(rng);
    const auto m = reduce_to_2d(r);
    for (Index n = 0; n < 3; ++n)
      for (Index c = 0; c < 5; ++c) {
        double sum = 0;
        for (Index pos = 0; pos < 4; ++pos) {
          const std::size_t flat = layout == TensorLayout::NSC
                                       ? static_cast<std::size_t>((n * 4 + pos) * 5 + c)
                                       : static_cast<std::size_t>((n * 5 + c) * 4 + pos);
          sum += r.data[flat];
        }
        CHECK(m.data(n, c) == doctest::Approx(sum / 4).epsilon(1e-6));
      }
  }
}

TEST_CASE("tensor imputation broadcasts over positions and commutes with pooling") {
  EmbeddingTensor t(TensorLayout::NSC, {1, 2, 2});
  t.data = {1, 2, 3, 4};
  const auto out = apply_debias_tensor(manual(2, {1}, {0.5}), t);
  CHECK(out.data == std::vector<float>{1, 0.5f, 3, 0.5f});
  CHECK(apply_debias_tensor(manual(2, {}, {}), t).data == t.data);
  CHECK_THROWS_AS(apply_debias_tensor(manual(3, {1}, {0.5}), t), DataError);

  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> u(-2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto layout = trial % 2 ? TensorLayout::NCHW : TensorLayout::NSC;
    EmbeddingTensor r = layout == TensorLayout::NSC ? EmbeddingTensor(layout, {2, 3, 6})
                                                    : EmbeddingTensor(layout, {2, 6, 3, 2});
    for (auto& v : r.data) v = u(rng);
    const auto m = manual(6, {0, 3, 5}, {0.25, -1.5, 2.0});
    const auto lhs = reduce_to_2d(apply_debias_tensor(m, r));
    const auto rhs = apply_debias(m, reduce_to_2d(r));
    CHECK(lhs.data.isApprox(rhs.data, 1e-6f));
  }
}

TEST_CASE("model JSON keeps field order and round trips") {
  auto m = manual(4, {1, 3}, {0.1, -2.5});
  m.provenance["dataset"] = "unit";
  const auto text = debias_model_to_json(m);
  CHECK(text.find("\"version\"") < text.find("\"mode\""));
  CHECK(text.find("\"mode\"") < text.find("\"k\""));
  CHECK(text.find("\"source_dim\"") < text.find("\"indices\""));
  CHECK(text.find("\"values\"") < text.find("\"provenance\""));
  CHECK(text.find("0.1") != std::string::npos);
  const auto back = debias_model_from_json(text);
  CHECK(back.indices == m.indices);
  CHECK(back.values == m.values);
  CHECK(back.mode == m.mode);
  CHECK(debias_model_to_json(back) == text);
  CHECK_THROWS(debias_model_from_json("{\"version\": 1}"));
}
