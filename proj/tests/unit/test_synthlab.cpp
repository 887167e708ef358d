#include "helpers.hpp"

#include "sfid/errors.hpp"
#include "sfid/imputation.hpp"
#include "sfid/metrics.hpp"
#include "sfid/synthlab.hpp"
#include "sfid/tasks.hpp"

#include <doctest.h>

#include <algorithm>

using namespace sfid;

namespace {

synth::SynthConfig config(double beta, std::uint64_t seed) {
  synth::SynthConfig cfg;
  cfg.n_samples = 5000;
  cfg.dim = 64;
  cfg.bias_dims = synth::pick_bias_dims(64, 10, seed);
  cfg.bias_strength = beta;
  cfg.stereotype_coupling = 0.0;
  cfg.seed = seed;
  return cfg;
}

ForestParams forest(std::uint64_t seed) {
  ForestParams p;
  p.n_trees = 40;
  p.seed = seed;
  return p;
}

double retrieval_skew(double beta, std::uint64_t seed) {
  synth::RetrievalConfig cfg;
  cfg.bias_strength = beta;
  cfg.bias_dims = synth::pick_bias_dims(cfg.dim, 10, seed);
  cfg.n_debias_train = 10;
  cfg.n_debias_val = 10;
  cfg.seed = seed;
  const auto s = synth::make_retrieval_scenario(cfg);
  RetrievalRun run;
  for (const auto& l : retrieve_all(s.texts, s.images, 100)) run.rankings.push_back(l.images);
  run.image_attributes = s.image_attributes.labels;
  return skew_at_m(run);
}

}  // namespace

TEST_CASE("generation is a pure function of the config") {
  const auto a = synth::gen_synthetic(config(5, 3));
  const auto b = synth::gen_synthetic(config(5, 3));
  CHECK(a.z.data == b.z.data);
  CHECK(a.attributes.labels == b.attributes.labels);
  CHECK(a.attributes.class_labels == b.attributes.class_labels);
  CHECK(synth::gen_synthetic(config(5, 4)).z.data != a.z.data);
}

TEST_CASE("bias and class directions sit where they are declared") {
  const auto d = synth::gen_synthetic(config(5, 1));
  for (Index j = 0; j < 64; ++j) {
    const bool in_b = std::binary_search(d.bias_dims.begin(), d.bias_dims.end(), j);
    if (in_b) CHECK(d.class_directions.col(j).isZero());
    else CHECK(d.attribute_directions.col(j).isZero());
  }
  const MatrixD gram = d.class_directions * d.class_directions.transpose();
  CHECK(gram.isApprox(MatrixD::Identity(gram.rows(), gram.cols()), 1e-9));
}

TEST_CASE("no bias leaves the attribute at chance") {
  for (std::uint64_t seed : {1, 2}) {
    const auto d = synth::gen_synthetic(config(0, seed));
    CHECK(fit_forest(d.z, d.attributes, forest(seed)).oob_accuracy <= 0.55);
  }
}

TEST_CASE("strong bias is predictable from the planted dims") {
  const auto d = synth::gen_synthetic(config(5, 2));
  const auto f = fit_forest(d.z, d.attributes, forest(2));
  CHECK(f.oob_accuracy >= 0.95);
  const auto top = top_k_indices(f.importances, 10);
  std::vector<Index> hit;
  std::set_intersection(top.begin(), top.end(), d.bias_dims.begin(), d.bias_dims.end(), std::back_inserter(hit));
  CHECK(hit.size() >= 8);
}

TEST_CASE("probe accuracy brackets chance and certainty") {
  auto d = synth::gen_synthetic(config(0, 5));
  const double chance = synth::probe_accuracy(d.z, d.attributes, 5, 5, forest(5));
  CHECK(chance >= 0.40);
  CHECK(chance <= 0.60);
  MatrixF leak = d.z.data;
  for (Index i = 0; i < leak.rows(); ++i) leak(i, 0) = static_cast<float>(d.attributes.labels[static_cast<std::size_t>(i)]);
  CHECK(synth::probe_accuracy(EmbeddingMatrix(leak), d.attributes, 5, 5, forest(5)) >= 0.99);
  AttributeTable one = d.attributes;
  std::fill(one.labels.begin(), one.labels.end(), 0);
  CHECK_THROWS_AS(synth::probe_accuracy(d.z, one, 5), DataError);
}

TEST_CASE("zeroing the planted dims removes the signal for any strength") {
  for (double beta : {1.0, 5.0}) {
    auto d = synth::gen_synthetic(config(beta, 6));
    for (Index j : d.bias_dims) d.z.data.col(j).setZero();
    CHECK(std::abs(synth::probe_accuracy(d.z, d.attributes, 6, 5, forest(6)) - 0.5) <= 0.1);
  }
}

TEST_CASE("imputing a superset of the planted dims debiases") {
  auto cfg = config(5, 7);
  const auto parts = synth::split_rows(synth::gen_synthetic(cfg), {3000, 1000, 1000});
  SfidParams p;
  p.k = 20;
  p.forest = forest(7);
  p.fallback_quantile = 0.05;
  const auto m = fit_sfid(parts[0].z, parts[0].attributes, parts[1].z, p);
  REQUIRE(std::includes(m.indices.begin(), m.indices.end(), parts[0].bias_dims.begin(), parts[0].bias_dims.end()));
  CHECK(synth::probe_accuracy(apply_debias(m, parts[2].z), parts[2].attributes, 7, 5, forest(7)) <= 0.60);
}

TEST_CASE("bad configs are ConfigErrors") {
  auto cfg = config(5, 1);
  cfg.dim = 12;
  cfg.bias_dims = {0, 1, 2, 3, 4};
  CHECK_THROWS_AS(synth::gen_synthetic(cfg), ConfigError);
  cfg = config(5, 1);
  cfg.bias_dims = {64};
  CHECK_THROWS_AS(synth::gen_synthetic(cfg), ConfigError);
  cfg = config(5, 1);
  cfg.noise_std = 0;
  CHECK_THROWS_AS(synth::gen_synthetic(cfg), ConfigError);
  CHECK_THROWS(synth::split_rows(synth::gen_synthetic(config(5, 1)), {4000, 2000}));
}

TEST_CASE("unbiased retrieval is balanced, biased retrieval is skewed") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) CHECK(retrieval_skew(0.0, seed) <= 0.05);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) CHECK(retrieval_skew(3.0, seed) >= 0.3);
}

TEST_CASE("noise-free retrieval puts the truth image first") {
  synth::RetrievalConfig cfg;
  cfg.bias_dims = synth::pick_bias_dims(cfg.dim, 10, 2);
  cfg.bias_strength = 0;
  cfg.image_noise = 1e-6;
  cfg.text_noise = 1e-6;
  cfg.attribute_noise = 0;
  cfg.n_debias_train = 10;
  cfg.n_debias_val = 10;
  cfg.seed = 2;
  const auto s = synth::make_retrieval_scenario(cfg);
  RetrievalRun run;
  run.depth = 1;
  for (const auto& l : retrieve_all(s.texts, s.images, 1)) run.rankings.push_back(l.images);
  run.image_attributes = s.image_attributes.labels;
  CHECK(recall_at_k(run, s.truth, 1) == 1.0);
}
