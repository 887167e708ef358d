#pragma once

#include "sfid/baselines.hpp"
#include "sfid/imputation.hpp"
#include "sfid/metrics.hpp"
#include "sfid/tasks.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace sfid::cli {

// Either kind of fitted debiaser, loaded from its JSON file.
using AnyModel = std::variant<DebiasModel, ResidualModel>;

AnyModel load_any_model(const std::filesystem::path& path);
EmbeddingMatrix apply_any(const AnyModel& model, const EmbeddingMatrix& z);

struct ZeroShotData {
  EmbeddingMatrix images;
  AttributeTable labels;  // attribute plus class column
  EmbeddingMatrix prototypes;
};

struct RetrievalData {
  EmbeddingMatrix images;
  AttributeTable image_attributes;
  EmbeddingMatrix texts;
  std::vector<Index> truth;  // per text row
};

// prompt_id<TAB>image_id, optional header; prompt ids must be 0..T-1 in order.
std::vector<Index> read_truth(const std::filesystem::path& path);
void write_truth(const std::vector<Index>& truth, const std::filesystem::path& path);

struct EvalOptions {
  DpDefinition definition = DpDefinition::RECALL;
  Index depth = 100;
  std::vector<Index> recall_k{1, 5, 10};
  int bootstrap = 0;
  std::uint64_t seed = 0;
};

MetricReport eval_zeroshot(const ZeroShotData& data, const EvalOptions& opt);
MetricReport eval_retrieval(const RetrievalData& data, const EvalOptions& opt,
                            std::vector<RankedList>* rankings = nullptr);

struct CaptionRow {
  std::string image_id;
  Gender true_gender = Gender::MALE;
  std::string caption;
  std::string reference;
};

// image_id<TAB>true_gender<TAB>caption<TAB>reference, optional header.
std::vector<CaptionRow> read_captions(const std::filesystem::path& path);
MetricReport eval_caption(const std::vector<CaptionRow>& rows, const EvalOptions& opt);

struct GenerationRow {
  std::string prompt_id;
  std::string profession;
  Gender prompt_gender = Gender::NEUTRAL;
  Gender detected_gender = Gender::NEUTRAL;
  std::string run_seed;
};

// prompt_id<TAB>profession<TAB>prompt_gender<TAB>detected_gender<TAB>run_seed, optional header.
std::vector<GenerationRow> read_generation(const std::filesystem::path& path);
MetricReport eval_generation(const std::vector<GenerationRow>& rows, const EvalOptions& opt);

}  // namespace sfid::cli
