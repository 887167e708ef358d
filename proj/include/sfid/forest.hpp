#pragma once

#include "sfid/embstore.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace sfid {

struct ForestParams {
  int n_trees = 100;
  std::optional<int> max_depth;  // unlimited when empty
  int min_samples_leaf = 1;
  int features_per_split = 0;  // 0 selects floor(sqrt(C))
  std::uint64_t seed = 0;
  int n_threads = 0;  // 0 uses hardware concurrency; output does not depend on it

  void validate() const;
};

// Flattened CART tree. Node 0 is the root; feature < 0 marks a leaf. `value`
// holds n_classes class frequencies per node (row-major by node).
struct DecisionTree {
  std::vector<std::int32_t> feature;
  std::vector<double> threshold;
  std::vector<std::int32_t> left;
  std::vector<std::int32_t> right;
  std::vector<double> value;

  std::size_t n_nodes() const { return feature.size(); }
  // Index of the leaf reached by a sample; x <= threshold goes left.
  template <typename Row>
  std::int32_t leaf(const Row& x) const {
    std::int32_t n = 0;
    while (feature[static_cast<std::size_t>(n)] >= 0) {
      const auto k = static_cast<std::size_t>(n);
      n = static_cast<double>(x(feature[k])) <= threshold[k] ? left[k] : right[k];
    }
    return n;
  }
};

struct ForestModel {
  int n_features = 0;
  int n_classes = 0;
  std::vector<DecisionTree> trees;
  VectorD importances;  // normalized mean decrease in Gini impurity
  double oob_accuracy = 0.0;

  void validate() const;
};

ForestModel fit_forest(const EmbeddingMatrix& z, const AttributeTable& y, const ForestParams& params);
ForestModel fit_forest(const MatrixF& z, std::span<const int> labels, int n_classes,
                       const ForestParams& params);

// N x A class probabilities: mean over trees of leaf class frequencies.
MatrixD predict_proba(const ForestModel& model, const MatrixF& z);
inline MatrixD predict_proba(const ForestModel& model, const EmbeddingMatrix& z) {
  return predict_proba(model, z.data);
}

// Row-wise max probability.
VectorD confidence(const MatrixD& proba);
// Row-wise argmax, ties to the lower class id.
std::vector<int> argmax_rows(const MatrixD& proba);

const VectorD& feature_importance(const ForestModel& model);

// RFO1 container, see docs/formats.md.
std::vector<std::uint8_t> encode_forest(const ForestModel& model);
ForestModel decode_forest(std::span<const std::uint8_t> bytes);
void save_forest(const ForestModel& model, const std::filesystem::path& path);
ForestModel load_forest(const std::filesystem::path& path);

}  // namespace sfid
