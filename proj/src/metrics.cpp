#include "sfid/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <array>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_map>

namespace sfid {

DpDefinition parse_dp_definition(std::string_view name) {
  if (name == "recall" || name == "RECALL") return DpDefinition::RECALL;
  if (name == "literal" || name == "LITERAL") return DpDefinition::LITERAL;
  throw ConfigError("unknown parity definition '" + std::string(name) + "' (expected recall or literal)");
}

namespace {

int infer_classes(std::span<const PredictionRecord> records, int n_classes) {
  int k = 0;
  for (const auto& r : records) {
    if (r.predicted_class < 0 || r.true_class < 0 || r.attribute < 0)
      throw DataError("prediction record with a negative index");
    k = std::max({k, r.predicted_class + 1, r.true_class + 1});
  }
  if (n_classes > 0) {
    if (k > n_classes) throw DataError("class index exceeds the declared class count");
    return n_classes;
  }
  return k;
}

}  // namespace

DpResult delta_dp_mean(std::span<const PredictionRecord> records, DpDefinition definition, int n_classes) {
  const int k = infer_classes(records, n_classes);
  std::size_t count[2] = {0, 0};
  for (const auto& r : records) {
    if (r.attribute > 1) throw DataError("delta_dp_mean takes a binary attribute");
    ++count[r.attribute];
  }
  if (count[0] == 0 || count[1] == 0) throw DataError("delta_dp_mean needs both attribute values present");

  // hits[a][c]: predicted c (restricted to true c under RECALL); base[a][c]: denominators.
  std::vector<double> hits[2], base[2];
  for (int a = 0; a < 2; ++a) {
    hits[a].assign(static_cast<std::size_t>(k), 0.0);
    base[a].assign(static_cast<std::size_t>(k), 0.0);
  }
  for (const auto& r : records) {
    const auto a = static_cast<std::size_t>(r.attribute);
    if (definition == DpDefinition::RECALL) {
      base[a][static_cast<std::size_t>(r.true_class)] += 1;
      if (r.predicted_class == r.true_class) hits[a][static_cast<std::size_t>(r.true_class)] += 1;
    } else {
      hits[a][static_cast<std::size_t>(r.predicted_class)] += 1;
    }
  }
  if (definition == DpDefinition::LITERAL)
    for (int a = 0; a < 2; ++a) std::fill(base[a].begin(), base[a].end(), static_cast<double>(count[a]));

  DpResult out;
  double sum = 0;
  for (int c = 0; c < k; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    if (base[0][ci] == 0 || base[1][ci] == 0) {
      out.skipped_classes.push_back(c);
      continue;
    }
    const double gap = std::abs(hits[1][ci] / base[1][ci] - hits[0][ci] / base[0][ci]);
    out.per_class_classes.push_back(c);
    out.per_class_gap.push_back(gap);
    sum += gap;
  }
  if (out.per_class_classes.empty()) throw DataError("no class has samples for both attribute values");
  out.value = sum / static_cast<double>(out.per_class_classes.size());
  return out;
}

DpMultiResult dp_multi(std::span<const PredictionRecord> records, int n_classes) {
  const int k = infer_classes(records, n_classes);
  int n_attr = 0;
  for (const auto& r : records) n_attr = std::max(n_attr, r.attribute + 1);
  std::vector<double> total(static_cast<std::size_t>(n_attr), 0.0);
  std::vector<std::vector<double>> hits(static_cast<std::size_t>(n_attr),
                                        std::vector<double>(static_cast<std::size_t>(k), 0.0));
  for (const auto& r : records) {
    total[static_cast<std::size_t>(r.attribute)] += 1;
    hits[static_cast<std::size_t>(r.attribute)][static_cast<std::size_t>(r.predicted_class)] += 1;
  }
  std::vector<int> present;
  for (int a = 0; a < n_attr; ++a)
    if (total[static_cast<std::size_t>(a)] > 0) present.push_back(a);
  if (present.size() < 2) throw DataError("dp_multi needs at least two attribute values present");

  DpMultiResult out;
  for (int c = 0; c < k; ++c) {
    // The largest pairwise gap is the spread between the extreme rates.
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int a : present) {
      const double rate = hits[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] /
                          total[static_cast<std::size_t>(a)];
      lo = std::min(lo, rate);
      hi = std::max(hi, rate);
    }
    out.per_class.push_back(hi - lo);
  }
  if (out.per_class.empty()) throw DataError("dp_multi over zero classes");
  for (double d : out.per_class) {
    out.mean += d;
    out.max = std::max(out.max, d);
  }
  out.mean /= static_cast<double>(out.per_class.size());
  return out;
}

// ---------------------------------------------------------------------------

void RetrievalRun::validate() const {
  if (n_attributes < 2) throw DataError("retrieval run needs at least two attribute values");
  if (depth < 1) throw ConfigError("retrieval depth must be positive");
  const auto pool = static_cast<Index>(image_attributes.size());
  for (int a : image_attributes)
    if (a < 0 || a >= n_attributes) throw DataError("image attribute out of range");
  std::vector<std::size_t> seen(static_cast<std::size_t>(pool), 0);
  std::size_t stamp = 0;
  for (const auto& list : rankings) {
    ++stamp;
    if (static_cast<Index>(list.size()) < depth)
      throw DataError("ranked list shorter than the retrieval depth");
    for (Index idx : list) {
      if (idx < 0 || idx >= pool) throw DataError("ranked list holds an invalid image index");
      if (seen[static_cast<std::size_t>(idx)] == stamp) throw DataError("ranked list repeats an image");
      seen[static_cast<std::size_t>(idx)] = stamp;
    }
  }
}

double recall_at_k(const RetrievalRun& run, std::span<const Index> truth, Index k) {
  run.validate();
  if (k < 1 || k > run.depth) throw ConfigError("K must lie in [1, M]");
  if (truth.size() != run.rankings.size()) throw DataError("one ground-truth image per prompt is required");
  if (run.rankings.empty()) throw DataError("retrieval run has no prompts");
  std::size_t hits = 0;
  for (std::size_t t = 0; t < run.rankings.size(); ++t) {
    const auto& list = run.rankings[t];
    if (std::find(list.begin(), list.begin() + k, truth[t]) != list.begin() + k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(run.rankings.size());
}

double skew_at_m(const RetrievalRun& run) {
  run.validate();
  if (run.rankings.empty()) throw DataError("retrieval run has no prompts");
  const auto na = static_cast<std::size_t>(run.n_attributes);
  std::vector<double> base(na, 0.0);
  for (int a : run.image_attributes) base[static_cast<std::size_t>(a)] += 1;
  for (auto& b : base) {
    if (b == 0) throw DataError("every attribute value needs at least one image in the pool");
    b /= static_cast<double>(run.image_attributes.size());
  }
  const auto m = static_cast<double>(run.depth);
  double total = 0;
  std::vector<double> got(na);
  for (const auto& list : run.rankings) {
    std::fill(got.begin(), got.end(), 0.0);
    for (Index r = 0; r < run.depth; ++r)
      got[static_cast<std::size_t>(run.image_attributes[static_cast<std::size_t>(list[static_cast<std::size_t>(r)])])] += 1;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < na; ++a)
      if (got[a] > 0) best = std::max(best, std::log(got[a] / m / base[a]));
    total += best;
  }
  return total / static_cast<double>(run.rankings.size());
}

// ---------------------------------------------------------------------------

std::string_view gender_name(Gender g) {
  switch (g) {
    case Gender::MALE: return "male";
    case Gender::FEMALE: return "female";
    case Gender::NEUTRAL: return "neutral";
  }
  return "neutral";
}

Gender parse_gender(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "male" || s == "m") return Gender::MALE;
  if (s == "female" || s == "f") return Gender::FEMALE;
  if (s == "neutral" || s == "n" || s == "none") return Gender::NEUTRAL;
  throw DataError("unknown gender label '" + std::string(name) + "'");
}

namespace {

bool token_char(unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; }

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

const std::unordered_map<std::string, Gender>& gender_words() {
  static const std::unordered_map<std::string, Gender> words = [] {
    std::unordered_map<std::string, Gender> w;
    for (const char* s : {"man", "men", "he", "him", "his", "himself", "boy", "boys", "male", "males",
                          "gentleman", "gentlemen", "father", "fathers", "dad", "son", "sons", "brother",
                          "brothers", "husband", "husbands", "king", "guy", "guys", "mr", "uncle", "nephew",
                          "grandfather", "boyfriend", "businessman", "policeman", "sportsman"})
      w.emplace(s, Gender::MALE);
    for (const char* s : {"woman", "women", "she", "her", "hers", "herself", "girl", "girls", "female",
                          "females", "lady", "ladies", "mother", "mothers", "mom", "daughter", "daughters",
                          "sister", "sisters", "wife", "wives", "queen", "mrs", "ms", "aunt", "niece",
                          "grandmother", "girlfriend", "businesswoman", "policewoman", "sportswoman"})
      w.emplace(s, Gender::FEMALE);
    return w;
  }();
  return words;
}

const std::unordered_map<std::string, std::string>& neutral_words() {
  static const std::unordered_map<std::string, std::string> table = {
      {"man", "person"},          {"woman", "person"},          {"men", "people"},
      {"women", "people"},        {"he", "they"},               {"she", "they"},
      {"him", "them"},            {"his", "their"},             {"her", "their"},
      {"hers", "theirs"},         {"himself", "themselves"},    {"herself", "themselves"},
      {"boy", "child"},           {"girl", "child"},            {"boys", "children"},
      {"girls", "children"},      {"male", "person"},           {"female", "person"},
      {"males", "people"},        {"females", "people"},        {"gentleman", "person"},
      {"lady", "person"},         {"gentlemen", "people"},      {"ladies", "people"},
      {"father", "parent"},       {"mother", "parent"},         {"fathers", "parents"},
      {"mothers", "parents"},     {"dad", "parent"},            {"mom", "parent"},
      {"son", "child"},           {"daughter", "child"},        {"sons", "children"},
      {"daughters", "children"},  {"brother", "sibling"},       {"sister", "sibling"},
      {"brothers", "siblings"},   {"sisters", "siblings"},      {"husband", "spouse"},
      {"wife", "spouse"},         {"husbands", "spouses"},      {"wives", "spouses"},
      {"king", "monarch"},        {"queen", "monarch"},         {"guy", "person"},
      {"guys", "people"},         {"uncle", "relative"},        {"aunt", "relative"},
      {"nephew", "relative"},     {"niece", "relative"},        {"grandfather", "grandparent"},
      {"grandmother", "grandparent"}, {"boyfriend", "partner"}, {"girlfriend", "partner"},
      {"businessman", "businessperson"}, {"businesswoman", "businessperson"},
      {"policeman", "police officer"}, {"policewoman", "police officer"},
      {"sportsman", "athlete"},   {"sportswoman", "athlete"},
  };
  return table;
}

// Strips a possessive "'s" so "man's" is looked up as "man".
std::pair<std::string, std::string> split_possessive(const std::string& token) {
  if (token.size() > 2 && token.compare(token.size() - 2, 2, "'s") == 0)
    return {token.substr(0, token.size() - 2), "'s"};
  return {token, ""};
}

template <class F>
void for_each_token(std::string_view text, F&& f) {
  std::size_t i = 0;
  while (i < text.size()) {
    if (!token_char(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && token_char(static_cast<unsigned char>(text[j]))) ++j;
    f(i, j);
    i = j;
  }
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  for_each_token(text, [&](std::size_t b, std::size_t e) { out.push_back(lower(text.substr(b, e - b))); });
  return out;
}

Gender caption_gender(std::string_view caption) {
  const auto& words = gender_words();
  for (const auto& token : tokenize(caption)) {
    auto it = words.find(token);
    if (it == words.end()) it = words.find(split_possessive(token).first);
    if (it != words.end()) return it->second;
  }
  return Gender::NEUTRAL;
}

std::string neutralize_caption(std::string_view caption) {
  const auto& table = neutral_words();
  std::string out;
  out.reserve(caption.size());
  std::size_t last = 0;
  for_each_token(caption, [&](std::size_t b, std::size_t e) {
    out.append(caption.substr(last, b - last));
    last = e;
    const std::string_view raw = caption.substr(b, e - b);
    auto [stem, suffix] = split_possessive(lower(raw));
    const auto it = table.find(stem);
    if (it == table.end()) {
      out.append(raw);
      return;
    }
    std::string repl = it->second;
    const bool all_upper = raw.size() > 1 && std::all_of(raw.begin(), raw.end(), [](unsigned char c) {
                             return !std::isalpha(c) || std::isupper(c);
                           });
    if (all_upper) {
      for (auto& c : repl) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      for (auto& c : suffix) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    } else if (std::isupper(static_cast<unsigned char>(raw[0]))) {
      repl[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(repl[0])));
    }
    out.append(repl).append(suffix);
  });
  out.append(caption.substr(last));
  return out;
}

double composite_rate(double overall, double male, double female) {
  return std::sqrt(overall * overall + (female - male) * (female - male));
}

MismatchRates mismatch_rates(std::span<const GenderOutcome> outcomes) {
  if (outcomes.empty()) throw DataError("mismatch rates over an empty set");
  double miss[2] = {0, 0}, total[2] = {0, 0};
  for (const auto& o : outcomes) {
    if (o.true_gender == Gender::NEUTRAL) throw DataError("true gender must be male or female");
    const int g = o.true_gender == Gender::MALE ? 0 : 1;
    total[g] += 1;
    if (o.detected_gender != Gender::NEUTRAL && o.detected_gender != o.true_gender) miss[g] += 1;
  }
  MismatchRates r;
  r.overall = (miss[0] + miss[1]) / static_cast<double>(outcomes.size());
  if (total[0] > 0) r.male = miss[0] / total[0];
  if (total[1] > 0) r.female = miss[1] / total[1];
  if (r.male && r.female) r.composite = composite_rate(r.overall, *r.male, *r.female);
  return r;
}

// ---------------------------------------------------------------------------

namespace {

// Exact-match unigram alignment with the maximum number of matches and, among
// those, the fewest chunks. Depth-first over candidate positions with pruning.
class Aligner {
 public:
  Aligner(std::span<const std::string> cand, std::span<const std::string> ref) : cand_(cand), ref_(ref) {
    std::unordered_map<std::string, int> ids;
    auto id = [&](const std::string& w) { return ids.emplace(w, static_cast<int>(ids.size())).first->second; };
    for (const auto& w : cand_) cand_id_.push_back(id(w));
    for (const auto& w : ref_) ref_id_.push_back(id(w));
    const auto nw = ids.size();
    std::vector<int> cc(nw, 0), rc(nw, 0);
    for (int w : cand_id_) ++cc[static_cast<std::size_t>(w)];
    for (int w : ref_id_) ++rc[static_cast<std::size_t>(w)];
    need_.resize(nw);
    for (std::size_t w = 0; w < nw; ++w) {
      need_[w] = std::min(cc[w], rc[w]);
      matches_ += need_[w];
    }
    // Occurrences of each candidate word strictly after position i.
    after_.assign(cand_id_.size(), 0);
    std::vector<int> seen(nw, 0);
    for (std::size_t i = cand_id_.size(); i-- > 0;) {
      after_[i] = seen[static_cast<std::size_t>(cand_id_[i])];
      ++seen[static_cast<std::size_t>(cand_id_[i])];
    }
    used_.assign(ref_id_.size(), 0);
    got_.assign(nw, 0);
  }

  int matches() const { return matches_; }

  MeteorDetail run() {
    MeteorDetail d;
    d.matches = matches_;
    if (matches_ == 0) return d;
    search(0, -1, 0);
    d.chunks = best_;
    d.exact = budget_ > 0;
    return d;
  }

 private:
  static constexpr long kBudget = 2'000'000;

  void search(std::size_t i, long prev_ref, int chunks) {
    if (chunks >= best_ || budget_ <= 0) return;
    --budget_;
    if (i == cand_id_.size()) {
      best_ = chunks;
      return;
    }
    const auto w = static_cast<std::size_t>(cand_id_[i]);
    if (got_[w] < need_[w]) {
      // Continuing the current chunk first finds good bounds early.
      if (prev_ref >= 0 && prev_ref + 1 < static_cast<long>(ref_id_.size())) {
        const auto j = static_cast<std::size_t>(prev_ref + 1);
        if (!used_[j] && ref_id_[j] == cand_id_[i]) take(i, j, chunks);
      }
      for (std::size_t j = 0; j < ref_id_.size(); ++j) {
        if (static_cast<long>(j) == prev_ref + 1 && prev_ref >= 0) continue;
        if (!used_[j] && ref_id_[j] == cand_id_[i]) take(i, j, chunks + 1);
      }
    }
    if (need_[w] - got_[w] <= after_[i]) search(i + 1, -1, chunks);
  }

  void take(std::size_t i, std::size_t j, int chunks) {
    const auto w = static_cast<std::size_t>(cand_id_[i]);
    used_[j] = 1;
    ++got_[w];
    search(i + 1, static_cast<long>(j), chunks);
    --got_[w];
    used_[j] = 0;
  }

  std::span<const std::string> cand_, ref_;
  std::vector<int> cand_id_, ref_id_, need_, after_, got_;
  std::vector<char> used_;
  int matches_ = 0;
  int best_ = std::numeric_limits<int>::max();
  long budget_ = kBudget;
};

}  // namespace

MeteorDetail meteor_detail(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return {};
  Aligner aligner(candidate, reference);
  MeteorDetail d = aligner.run();
  if (d.matches == 0) return d;
  const double m = d.matches;
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(d.chunks) / m;
  d.score = fmean * (1.0 - 0.5 * frag * frag * frag);
  return d;
}

double meteor(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return meteor_detail(candidate, reference).score;
}

double max_meteor(std::span<const std::string> candidate, std::span<const std::string> truth,
                  std::span<const std::string> neutral) {
  return std::max(meteor(candidate, truth), meteor(candidate, neutral));
}

// ---------------------------------------------------------------------------

double generation_skew(const GenerationCounts& counts) {
  if (counts.generations < 1) throw ConfigError("generations per prompt must be positive");
  if (counts.per_profession.empty()) throw DataError("generation counts hold no professions");
  double total = 0;
  for (const auto& [m, f] : counts.per_profession) {
    if (m < 0 || f < 0 || m + f > counts.generations)
      throw DataError("profession counts must be non-negative and sum to at most C");
    total += static_cast<double>(std::max(m, f)) / counts.generations;
  }
  return total / static_cast<double>(counts.per_profession.size());
}

double discrepancy(int n_male, int n_female, int n_prompts) {
  if (n_prompts < 1) throw DataError("discrepancy needs at least one prompt");
  if (n_male < 0 || n_female < 0) throw DataError("counts must be non-negative");
  const double m = static_cast<double>(n_male) / n_prompts - 0.5;
  const double f = static_cast<double>(n_female) / n_prompts - 0.5;
  return std::sqrt(m * m + f * f);
}

// ---------------------------------------------------------------------------

MetricReport& MetricReport::add(std::string name, double value, std::size_t n, bool percent,
                                std::optional<BootstrapResult> ci) {
  entries.push_back({std::move(name), value, ci, n, percent});
  return *this;
}

const MetricEntry* MetricReport::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& e : entries) {
    nlohmann::ordered_json v;
    v["value"] = e.value;
    if (e.ci) {
      v["ci_mean"] = e.ci->mean;
      v["ci_std"] = e.ci->std;
    }
    v["n"] = e.n;
    j[e.name] = std::move(v);
  }
  return j.dump(2) + "\n";
}

std::string MetricReport::to_table() const {
  std::vector<std::array<std::string, 4>> rows;
  rows.push_back({"metric", "value", "ci", "n"});
  for (const auto& e : entries) {
    const double scale = e.percent ? 100.0 : 1.0;
    std::ostringstream v, ci;
    v << std::fixed << std::setprecision(e.percent ? 2 : 4) << e.value * scale << (e.percent ? "%" : "");
    if (e.ci)
      ci << std::fixed << std::setprecision(e.percent ? 2 : 4) << e.ci->mean * scale << " +/- "
         << e.ci->std * scale;
    else
      ci << "-";
    rows.push_back({e.name, v.str(), ci.str(), std::to_string(e.n)});
  }
  std::array<std::size_t, 4> width{};
  for (const auto& r : rows)
    for (std::size_t c = 0; c < 4; ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream out;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < 4; ++c) {
      if (c == 0)
        out << std::left << std::setw(static_cast<int>(width[c])) << r[c];
      else
        out << "  " << std::right << std::setw(static_cast<int>(width[c])) << r[c];
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace sfid
