#pragma once

#include "sfid/embstore.hpp"
#include "sfid/forest.hpp"

#include <cstdint>
#include <vector>

namespace sfid::synth {

// Axis: the attribute shifts the embedding along a direction supported on B.
// Rotated: each attribute owns an orthogonal direction on B whose entries are
// all +-1/sqrt(|B|), and a sample sits at a random sign along it. Every column
// then has the same marginal under both attributes; the attribute is only
// visible jointly across columns.
enum class BiasGeometry { Axis, Rotated };

struct SynthConfig {
  Index n_samples = 5000;
  Index dim = 256;
  int n_classes = 8;
  int n_attributes = 2;
  std::vector<Index> bias_dims;  // B
  double bias_strength = 5.0;    // beta
  double class_strength = 4.0;   // gamma
  double noise_std = 1.0;        // sigma
  // Probability that a sample's attribute is forced to its class's stereotyped
  // value (class mod A) instead of drawn uniformly.
  double stereotype_coupling = 0.7;
  BiasGeometry geometry = BiasGeometry::Axis;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthData {
  EmbeddingMatrix z;
  AttributeTable attributes;  // with class labels
  std::vector<Index> bias_dims;
  MatrixD class_directions;      // n_classes x dim, orthonormal, zero on B
  MatrixD attribute_directions;  // n_attributes x dim, supported on B
};

// `count` distinct sorted indices in [0, dim).
std::vector<Index> pick_bias_dims(Index dim, Index count, std::uint64_t seed);

SynthData gen_synthetic(const SynthConfig& cfg);

// Consecutive row blocks of the requested sizes (must sum to <= n_samples).
std::vector<SynthData> split_rows(const SynthData& data, const std::vector<Index>& sizes);

// One prompt per class: its direction plus `leak` times the class's stereotyped
// attribute direction.
EmbeddingMatrix class_prototypes(const SynthData& data, double leak = 0.0);

// 5-fold cross-validated accuracy of a default forest predicting y from z.
double probe_accuracy(const EmbeddingMatrix& z, const AttributeTable& y, std::uint64_t seed,
                      int folds = 5, ForestParams forest = {});

struct RetrievalConfig {
  Index n_images = 1000;  // even; images come in attribute-counterfactual pairs
  Index dim = 256;
  std::vector<Index> bias_dims;
  double bias_strength = 3.0;     // attribute offset on images and stereotype leak on captions
  double content_strength = 1.0;  // per-dim std of the shared scene content
  double detail_strength = 0.1;   // per-dim std of image-specific detail
  double image_noise = 0.1;
  double attribute_noise = 1.0;  // extra per-dim std on B, makes some photos ambiguous
  double text_noise = 0.3;
  Index n_debias_train = 4000;
  Index n_debias_val = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RetrievalScenario {
  EmbeddingMatrix images;
  AttributeTable image_attributes;
  EmbeddingMatrix texts;      // one caption per image
  std::vector<Index> truth;   // caption t describes image truth[t]
  EmbeddingMatrix debias_train;
  AttributeTable debias_train_attributes;
  EmbeddingMatrix debias_val;
  AttributeTable debias_val_attributes;
  std::vector<Index> bias_dims;
};

RetrievalScenario make_retrieval_scenario(const RetrievalConfig& cfg);

}  // namespace sfid::synth
