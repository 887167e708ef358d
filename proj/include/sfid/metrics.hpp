#pragma once

#include "sfid/embstore.hpp"
#include "sfid/errors.hpp"
#include "sfid/random.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sfid {

// All metrics are fractions; reports scale to percent on request.

struct PredictionRecord {
  int predicted_class = 0;
  int true_class = 0;
  int attribute = 0;
};

// RECALL conditions on the true class, LITERAL only on the attribute.
enum class DpDefinition { RECALL, LITERAL };

DpDefinition parse_dp_definition(std::string_view name);

struct DpResult {
  double value = 0;
  std::vector<int> per_class_classes;   // classes that entered the mean
  std::vector<double> per_class_gap;    // |rate(a=1) - rate(a=0)| for those classes
  std::vector<int> skipped_classes;     // missing one attribute
};

// Attributes must be 0/1 with both present. Classes run over 0..n_classes-1;
// n_classes = 0 infers max(class index) + 1.
DpResult delta_dp_mean(std::span<const PredictionRecord> records, DpDefinition definition = DpDefinition::RECALL,
                       int n_classes = 0);

struct DpMultiResult {
  double mean = 0;
  double max = 0;
  std::vector<double> per_class;
};

// Per class, the largest pairwise gap of P(pred = c | a) over present attributes.
DpMultiResult dp_multi(std::span<const PredictionRecord> records, int n_classes = 0);

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalRun {
  std::vector<std::vector<Index>> rankings;  // per prompt, best first
  std::vector<int> image_attributes;         // per image in the pool
  int n_attributes = 2;
  Index depth = 100;                         // M

  void validate() const;
};

// Fraction of prompts whose truth image is within the first K entries.
double recall_at_k(const RetrievalRun& run, std::span<const Index> truth, Index k);

// Mean over prompts of max_a ln(p_hat_a / p_a) over the top-M set.
double skew_at_m(const RetrievalRun& run);

// ---------------------------------------------------------------------------
// Captioning

enum class Gender { MALE, FEMALE, NEUTRAL };

std::string_view gender_name(Gender g);
Gender parse_gender(std::string_view name);  // DataError on anything else

// Lowercase tokens; separators are everything except letters, digits and apostrophes.
std::vector<std::string> tokenize(std::string_view text);

Gender caption_gender(std::string_view caption);
std::string neutralize_caption(std::string_view caption);

struct GenderOutcome {
  Gender true_gender = Gender::MALE;
  Gender detected_gender = Gender::NEUTRAL;
};

struct MismatchRates {
  std::optional<double> male, female;  // absent when that gender has no samples
  double overall = 0;
  std::optional<double> composite;     // needs both male and female
};

double composite_rate(double overall, double male, double female);
MismatchRates mismatch_rates(std::span<const GenderOutcome> outcomes);

struct MeteorDetail {
  double score = 0;
  int matches = 0;
  int chunks = 0;
  bool exact = true;  // false if the alignment search hit its budget
};

MeteorDetail meteor_detail(std::span<const std::string> candidate, std::span<const std::string> reference);
double meteor(std::span<const std::string> candidate, std::span<const std::string> reference);
double max_meteor(std::span<const std::string> candidate, std::span<const std::string> truth,
                  std::span<const std::string> neutral);

// ---------------------------------------------------------------------------
// Generation

struct GenerationCounts {
  std::vector<std::pair<int, int>> per_profession;  // (N_m, N_f)
  int generations = 10;                             // C
};

double generation_skew(const GenerationCounts& counts);
double discrepancy(int n_male, int n_female, int n_prompts);

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapResult {
  double mean = 0;
  double std = 0;
};

// Resamples records with replacement and reports mean and population std of
// the statistic. Deterministic per seed.
template <class Record, class Statistic>
BootstrapResult bootstrap_ci(std::span<const Record> records, Statistic&& statistic, int iterations = 1000,
                             std::uint64_t seed = 0) {
  if (records.empty()) throw DataError("bootstrap over an empty sample");
  if (iterations < 1) throw ConfigError("bootstrap needs at least one iteration");
  Rng rng = make_rng(seed, "bootstrap");
  std::uniform_int_distribution<std::size_t> pick(0, records.size() - 1);
  std::vector<Record> sample(records.size());
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(iterations));
  for (int it = 0; it < iterations; ++it) {
    for (auto& s : sample) s = records[pick(rng)];
    stats.push_back(static_cast<double>(statistic(std::span<const Record>(sample))));
  }
  BootstrapResult r;
  for (double s : stats) r.mean += s;
  r.mean /= static_cast<double>(stats.size());
  for (double s : stats) r.std += (s - r.mean) * (s - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(stats.size()));
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricEntry {
  std::string name;
  double value = 0;
  std::optional<BootstrapResult> ci;
  std::size_t n = 0;
  bool percent = false;  // scale by 100 when formatted
};

struct MetricReport {
  std::vector<MetricEntry> entries;

  MetricReport& add(std::string name, double value, std::size_t n, bool percent = false,
                    std::optional<BootstrapResult> ci = std::nullopt);
  const MetricEntry* find(std::string_view name) const;

  std::string to_json() const;
  std::string to_table() const;
};

}  // namespace sfid
