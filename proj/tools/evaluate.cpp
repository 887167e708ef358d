#include "evaluate.hpp"

#include "sfid/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace sfid::cli {

AnyModel load_any_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  nlohmann::json probe;
  try {
    probe = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": not valid JSON: " + e.what());
  }
  try {
    if (probe.is_object() && probe.value("mode", "") == "DEAR") return residual_model_from_json(text);
    return debias_model_from_json(text);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

EmbeddingMatrix apply_any(const AnyModel& model, const EmbeddingMatrix& z) {
  if (const auto* m = std::get_if<DebiasModel>(&model)) return apply_debias(*m, z);
  return apply_dear(std::get<ResidualModel>(model), z);
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) return out;
    start = pos + 1;
  }
}

// Tab-separated rows with a fixed column count. A first row whose first field
// equals `header_key` is skipped.
std::vector<std::vector<std::string>> read_table(const std::filesystem::path& path, std::size_t columns,
                                                 const std::string& header_key) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (rows.empty() && line_no == 1 && fields[0] == header_key) continue;
    if (fields.size() != columns)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                      " tab-separated columns, found " + std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw DataError(path.string() + ": no rows");
  return rows;
}

Index parse_index(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  long long v = -1;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || v < 0) throw DataError(where + ": '" + s + "' is not a non-negative integer");
  return static_cast<Index>(v);
}

template <class Record, class Stat>
std::optional<BootstrapResult> maybe_bootstrap(const std::vector<Record>& records, Stat stat,
                                               const EvalOptions& opt, std::string_view tag) {
  if (opt.bootstrap <= 0) return std::nullopt;
  return bootstrap_ci<Record>(records, stat, opt.bootstrap, derive_seed(opt.seed, tag));
}

}  // namespace

std::vector<Index> read_truth(const std::filesystem::path& path) {
  const auto rows = read_table(path, 2, "prompt_id");
  std::vector<Index> truth;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto where = path.string() + ":" + std::to_string(i + 1);
    if (parse_index(rows[i][0], where) != static_cast<Index>(i))
      throw DataError(where + ": prompt ids must run 0, 1, 2, ... in file order");
    truth.push_back(parse_index(rows[i][1], where));
  }
  return truth;
}

void write_truth(const std::vector<Index>& truth, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "prompt_id\timage_id\n";
  for (std::size_t t = 0; t < truth.size(); ++t) out << t << '\t' << truth[t] << '\n';
}

// ---------------------------------------------------------------------------

MetricReport eval_zeroshot(const ZeroShotData& data, const EvalOptions& opt) {
  check_paired(data.images, data.labels);
  if (!data.labels.class_labels) throw DataError("zero-shot labels need a class column");
  const auto pred = zero_shot_classify(data.images, data.prototypes);
  const int n_classes = static_cast<int>(data.prototypes.n_samples());
  std::vector<PredictionRecord> records;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int truth = (*data.labels.class_labels)[i];
    if (truth >= n_classes) throw DataError("class label " + std::to_string(truth) + " has no prototype");
    records.push_back({pred[i], truth, data.labels.labels[i]});
  }
  auto acc = [](std::span<const PredictionRecord> rs) {
    std::size_t hit = 0;
    for (const auto& r : rs) hit += r.predicted_class == r.true_class;
    return static_cast<double>(hit) / static_cast<double>(rs.size());
  };
  MetricReport report;
  report.add("accuracy", acc(records), records.size(), true, maybe_bootstrap(records, acc, opt, "eval.acc"));
  if (data.labels.n_attributes() == 2) {
    auto dp = [&](std::span<const PredictionRecord> rs) { return delta_dp_mean(rs, opt.definition, n_classes).value; };
    report.add(opt.definition == DpDefinition::RECALL ? "delta_dp_mean" : "delta_dp_mean_literal", dp(records),
               records.size(), true, maybe_bootstrap(records, dp, opt, "eval.dp"));
  }
  const auto multi = dp_multi(records, n_classes);
  report.add("dp_mean", multi.mean, records.size(), true);
  report.add("dp_max", multi.max, records.size(), true);
  return report;
}

MetricReport eval_retrieval(const RetrievalData& data, const EvalOptions& opt, std::vector<RankedList>* rankings) {
  check_paired(data.images, data.image_attributes);
  if (data.truth.size() != static_cast<std::size_t>(data.texts.n_samples()))
    throw DataError("ground truth has " + std::to_string(data.truth.size()) + " rows for " +
                    std::to_string(data.texts.n_samples()) + " captions");
  auto lists = retrieve_all(data.texts, data.images, opt.depth);
  RetrievalRun run;
  run.image_attributes = data.image_attributes.labels;
  run.n_attributes = data.image_attributes.n_attributes();
  run.depth = opt.depth;
  for (const auto& l : lists) run.rankings.push_back(l.images);

  std::vector<Index> prompts(run.rankings.size());
  std::iota(prompts.begin(), prompts.end(), Index{0});
  auto subset = [&](std::span<const Index> ids) {
    RetrievalRun r;
    r.image_attributes = run.image_attributes;
    r.n_attributes = run.n_attributes;
    r.depth = run.depth;
    std::vector<Index> truth;
    for (Index t : ids) {
      r.rankings.push_back(run.rankings[static_cast<std::size_t>(t)]);
      truth.push_back(data.truth[static_cast<std::size_t>(t)]);
    }
    return std::make_pair(std::move(r), std::move(truth));
  };
  MetricReport report;
  auto skew = [&](std::span<const Index> ids) { return skew_at_m(subset(ids).first); };
  report.add("skew@" + std::to_string(opt.depth), skew_at_m(run), prompts.size(), false,
             maybe_bootstrap(prompts, skew, opt, "eval.skew"));
  for (Index k : opt.recall_k) {
    auto rec = [&](std::span<const Index> ids) {
      auto [r, truth] = subset(ids);
      return recall_at_k(r, truth, k);
    };
    report.add("recall@" + std::to_string(k), recall_at_k(run, data.truth, k), prompts.size(), true,
               maybe_bootstrap(prompts, rec, opt, "eval.recall"));
  }
  if (rankings) *rankings = std::move(lists);
  return report;
}

// ---------------------------------------------------------------------------

std::vector<CaptionRow> read_captions(const std::filesystem::path& path) {
  std::vector<CaptionRow> out;
  for (auto& r : read_table(path, 4, "image_id")) {
    const Gender g = parse_gender(r[1]);
    if (g == Gender::NEUTRAL) throw DataError(path.string() + ": true gender must be male or female");
    out.push_back({r[0], g, r[2], r[3]});
  }
  return out;
}

MetricReport eval_caption(const std::vector<CaptionRow>& rows, const EvalOptions& opt) {
  struct Scored {
    GenderOutcome outcome;
    double meteor = 0, max_meteor = 0;
  };
  std::vector<Scored> scored;
  for (const auto& r : rows) {
    const auto cand = tokenize(r.caption);
    const auto truth = tokenize(r.reference);
    const auto neutral = tokenize(neutralize_caption(r.reference));
    scored.push_back({{r.true_gender, caption_gender(r.caption)}, meteor(cand, truth), max_meteor(cand, truth, neutral)});
  }
  auto outcomes = [](std::span<const Scored> s) {
    std::vector<GenderOutcome> o;
    for (const auto& x : s) o.push_back(x.outcome);
    return mismatch_rates(o);
  };
  auto mean_of = [](std::span<const Scored> s, double Scored::*field) {
    double sum = 0;
    for (const auto& x : s) sum += x.*field;
    return sum / static_cast<double>(s.size());
  };
  const auto mr = outcomes(scored);
  MetricReport report;
  if (mr.male) report.add("MR_M", *mr.male, scored.size(), true);
  if (mr.female) report.add("MR_F", *mr.female, scored.size(), true);
  report.add("MR_O", mr.overall, scored.size(), true);
  if (mr.composite) {
    auto mrc = [&](std::span<const Scored> s) { return outcomes(s).composite.value_or(0.0); };
    report.add("MR_C", *mr.composite, scored.size(), true, maybe_bootstrap(scored, mrc, opt, "eval.mrc"));
  }
  auto met = [&](std::span<const Scored> s) { return mean_of(s, &Scored::meteor); };
  auto maxmet = [&](std::span<const Scored> s) { return mean_of(s, &Scored::max_meteor); };
  report.add("METEOR", met(scored), scored.size(), false, maybe_bootstrap(scored, met, opt, "eval.meteor"));
  report.add("MaxMETEOR", maxmet(scored), scored.size(), false, maybe_bootstrap(scored, maxmet, opt, "eval.maxmeteor"));
  return report;
}

// ---------------------------------------------------------------------------

std::vector<GenerationRow> read_generation(const std::filesystem::path& path) {
  std::vector<GenerationRow> out;
  for (auto& r : read_table(path, 5, "prompt_id"))
    out.push_back({r[0], r[1], parse_gender(r[2]), parse_gender(r[3]), r[4]});
  return out;
}

namespace {

BootstrapResult spread(const std::vector<double>& v) {
  BootstrapResult r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  for (double x : v) r.std += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(v.size()));
  return r;
}

}  // namespace

MetricReport eval_generation(const std::vector<GenerationRow>& rows, const EvalOptions&) {
  std::map<std::string, std::vector<GenderOutcome>> gendered_by_run;
  std::map<std::string, std::pair<int, int>> per_profession;
  std::map<std::string, int> rows_per_profession;
  std::map<std::string, std::array<int, 3>> neutral_by_run;  // male, female, prompts
  for (const auto& r : rows) {
    if (r.prompt_gender == Gender::NEUTRAL) {
      auto& c = per_profession[r.profession];
      c.first += r.detected_gender == Gender::MALE;
      c.second += r.detected_gender == Gender::FEMALE;
      ++rows_per_profession[r.profession];
      auto& run = neutral_by_run[r.run_seed];
      run[0] += r.detected_gender == Gender::MALE;
      run[1] += r.detected_gender == Gender::FEMALE;
      ++run[2];
    } else {
      gendered_by_run[r.run_seed].push_back({r.prompt_gender, r.detected_gender});
    }
  }
  MetricReport report;
  if (!gendered_by_run.empty()) {
    std::vector<double> mm, mf, mo, mc;
    std::size_t n = 0;
    for (const auto& [run, outcomes] : gendered_by_run) {
      const auto mr = mismatch_rates(outcomes);
      n += outcomes.size();
      if (mr.male) mm.push_back(*mr.male);
      if (mr.female) mf.push_back(*mr.female);
      mo.push_back(mr.overall);
      if (mr.composite) mc.push_back(*mr.composite);
    }
    auto add = [&](const char* name, const std::vector<double>& v) {
      if (v.empty()) return;
      const auto s = spread(v);
      report.add(name, s.mean, n, true, v.size() > 1 ? std::optional(s) : std::nullopt);
    };
    add("MR_M", mm);
    add("MR_F", mf);
    add("MR_O", mo);
    add("MR_C", mc);
  }
  if (!per_profession.empty()) {
    GenerationCounts counts;
    counts.generations = rows_per_profession.begin()->second;
    for (const auto& [prof, c] : per_profession) {
      if (rows_per_profession[prof] != counts.generations)
        throw DataError("profession '" + prof + "' has " + std::to_string(rows_per_profession[prof]) +
                        " neutral generations, expected " + std::to_string(counts.generations));
      counts.per_profession.push_back(c);
    }
    report.add("generation_skew", generation_skew(counts), counts.per_profession.size(), true);
    std::vector<double> disc;
    for (const auto& [run, c] : neutral_by_run) disc.push_back(discrepancy(c[0], c[1], c[2]));
    const auto s = spread(disc);
    report.add("discrepancy", s.mean, disc.size(), false, disc.size() > 1 ? std::optional(s) : std::nullopt);
  }
  if (report.entries.empty()) throw DataError("generation label file has no usable rows");
  return report;
}

}  // namespace sfid::cli
