#pragma once

#include "sfid/embstore.hpp"
#include "sfid/forest.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sfid {

// LC/HC are the low/high-confidence imputations. ZERO and GAUSS are the
// ablation fills. DROP removes the selected columns instead of imputing them.
enum class ImputeMode { LC, HC, ZERO, GAUSS, DROP };

const char* mode_name(ImputeMode mode);
ImputeMode parse_mode(const std::string& s);

struct SfidParams {
  Index k = 50;
  double tau = 0.7;
  ImputeMode mode = ImputeMode::LC;
  int target_attribute = -1;  // HC only
  double hc_tau = 0.9;
  // When set, an empty low-confidence set falls back to this fraction of the
  // least confident validation samples.
  std::optional<double> fallback_quantile;
  ForestParams forest;
  std::string dataset_tag;
};

// Selected feature indices S with their imputation values. Portable: stored
// sparse, applied to any query matrix of width source_dim.
struct DebiasModel {
  ImputeMode mode = ImputeMode::LC;
  Index k = 0;
  double tau = 1.0;
  Index source_dim = 0;
  std::vector<Index> indices;  // sorted ascending
  std::vector<double> values;  // aligned with indices
  std::uint64_t noise_seed = 0;  // GAUSS only
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  void validate() const;
  Index output_dim() const { return mode == ImputeMode::DROP ? source_dim - k : source_dim; }
};

// Detailed result of fitting: the model plus what produced it.
struct SfidFit {
  DebiasModel model;
  ForestModel forest;
  VectorD val_confidence;
  std::vector<int> val_prediction;
  std::vector<Index> confidence_set;
};

// Indices of the k largest scores (ties to the lower index), sorted ascending.
std::vector<Index> top_k_indices(const VectorD& scores, Index k);

// Validation rows with confidence <= tau.
std::vector<Index> low_confidence_set(const VectorD& confidence, double tau);
// Validation rows predicted as `target` with confidence >= tau.
std::vector<Index> high_confidence_set(const VectorD& confidence, std::span<const int> prediction,
                                       int target, double tau);

SfidFit fit_sfid_detailed(const EmbeddingMatrix& z_train, const AttributeTable& y_train,
                          const EmbeddingMatrix& z_val, const SfidParams& params);
// Same as fit_sfid_detailed with an already trained forest; lets sweeps over k
// and tau share one forest.
SfidFit fit_sfid_with_forest(ForestModel forest, const std::vector<std::string>& attribute_names,
                             const EmbeddingMatrix& z_val, const SfidParams& params);
DebiasModel fit_sfid(const EmbeddingMatrix& z_train, const AttributeTable& y_train,
                     const EmbeddingMatrix& z_val, const SfidParams& params);

// Overwrites columns `indices` of every row with `values`.
template <typename Derived>
void impute_columns(Eigen::MatrixBase<Derived>& m, std::span<const Index> indices,
                    std::span<const double> values) {
  using Scalar = typename Derived::Scalar;
  for (std::size_t j = 0; j < indices.size(); ++j)
    m.col(indices[j]).setConstant(static_cast<Scalar>(values[j]));
}

// GAUSS draws fresh N(0,1) fills from `noise_seed` (defaults to the model's).
EmbeddingMatrix apply_debias(const DebiasModel& model, const EmbeddingMatrix& z,
                             std::optional<std::uint64_t> noise_seed = std::nullopt);

// Mean over the sequence axis (NSC) or over H x W (NCHW).
EmbeddingMatrix reduce_to_2d(const EmbeddingTensor& t);
// Broadcasts each imputed channel value over every non-channel position.
EmbeddingTensor apply_debias_tensor(const DebiasModel& model, const EmbeddingTensor& t,
                                    std::optional<std::uint64_t> noise_seed = std::nullopt);

std::string debias_model_to_json(const DebiasModel& model);
DebiasModel debias_model_from_json(const std::string& text);
void save_debias_model(const DebiasModel& model, const std::filesystem::path& path);
DebiasModel load_debias_model(const std::filesystem::path& path);

}  // namespace sfid
