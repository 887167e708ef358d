#pragma once

#include "sfid/embstore.hpp"
#include "sfid/imputation.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace sfid {

// ---------------------------------------------------------------------------
// Mutual-information pruning (CLIP-clip)

// Equal-frequency bin of each value: floor(#{values strictly below} * bins / N).
// Tied values always share a bin, so a constant column lands in bin 0.
std::vector<int> equal_frequency_bins(std::span<const float> values, int bins);

// Plug-in MI in nats of two discrete variables.
double plugin_mutual_information(std::span<const int> x, int nx, std::span<const int> y, int ny);

// Per-feature MI(feature_j; attribute), clamped at 0.
VectorD mutual_info_features(const EmbeddingMatrix& z, const AttributeTable& y, int bins = 64);

enum class ClipImpute { ZERO, DROP };

DebiasModel fit_clipclip(const EmbeddingMatrix& z, const AttributeTable& y, Index k,
                         ClipImpute impute = ClipImpute::ZERO, int bins = 64);

// ---------------------------------------------------------------------------
// Additive residual debiasing (DeAR)

struct DearLambdas {
  double reconstruction = 1.0;  // lambda1
  double confidence = 1.0;      // lambda2
  double adversarial = 1.0;     // lambda3
};

struct DearTraining {
  int epochs = 200;
  double step_size = 1e-3;
  std::uint64_t seed = 0;
};

struct ResidualModel {
  MatrixD classifier_weights;  // A x C
  VectorD classifier_bias;     // A
  MatrixD residual_weights;    // C x C
  VectorD residual_bias;       // C
  DearLambdas lambdas;
  std::vector<double> classifier_log;  // cross-entropy per epoch
  std::vector<double> train_log;       // composite loss per epoch, plus the final value
  std::uint64_t seed = 0;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  Index dim() const { return residual_weights.rows(); }
  Index n_classes() const { return classifier_weights.rows(); }
  void validate() const;
};

struct DearLoss {
  double total = 0, reconstruction = 0, confidence = 0, cross_entropy = 0;
};

// Composite objective over residual parameters, all terms averaged over rows:
//   l1 * mean ||h_a(z)||^2 + l2 * mean max softmax(h_c(z_a)) - l3 * mean CE(h_c(z_a), y)
// with z_a = z + h_a(z). Gradients are written when the outputs are non-null.
DearLoss dear_objective(const MatrixD& z, std::span<const int> y, const MatrixD& classifier_weights,
                        const VectorD& classifier_bias, const MatrixD& residual_weights,
                        const VectorD& residual_bias, const DearLambdas& lambdas,
                        MatrixD* grad_weights = nullptr, VectorD* grad_bias = nullptr);

// Softmax probabilities of the affine classifier.
MatrixD classifier_proba(const MatrixD& z, const MatrixD& weights, const VectorD& bias);

ResidualModel fit_dear(const EmbeddingMatrix& z, const AttributeTable& y, const DearLambdas& lambdas = {},
                       const DearTraining& training = {});

EmbeddingMatrix apply_dear(const ResidualModel& model, const EmbeddingMatrix& z);

std::string residual_model_to_json(const ResidualModel& model);
ResidualModel residual_model_from_json(const std::string& text);
void save_residual_model(const ResidualModel& model, const std::filesystem::path& path);
ResidualModel load_residual_model(const std::filesystem::path& path);

}  // namespace sfid
