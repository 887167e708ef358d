#include "sfid/forest.hpp"

#include "sfid/errors.hpp"
#include "sfid/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <thread>

namespace sfid {

void ForestParams::validate() const {
  if (n_trees < 1) throw ConfigError("n_trees must be >= 1");
  if (min_samples_leaf < 1) throw ConfigError("min_samples_leaf must be >= 1");
  if (max_depth && *max_depth < 0) throw ConfigError("max_depth must be >= 0");
  if (features_per_split < 0) throw ConfigError("features_per_split must be >= 0");
}

void ForestModel::validate() const {
  if (importances.size() != n_features) throw DataError("importance vector length mismatch");
  for (const auto& t : trees)
    for (auto f : t.feature)
      if (f >= n_features) throw DataError("split feature out of range");
}

namespace {

struct Entry {
  float value;
  std::int32_t label;
  std::int32_t weight;
};

// Builds one tree over a feature-major copy of the data. Sample weights are
// bootstrap multiplicities; samples with weight zero never enter the tree.
class TreeBuilder {
 public:
  TreeBuilder(const std::vector<float>& columns, const std::vector<std::int32_t>& sorted,
              Index n_samples, int n_features, std::span<const int> labels, int n_classes,
              const ForestParams& params)
      : columns_(columns),
        sorted_(sorted),
        n_samples_(n_samples),
        n_features_(n_features),
        labels_(labels),
        n_classes_(n_classes),
        params_(params) {
    mtry_ = params.features_per_split > 0
                ? std::min(params.features_per_split, n_features)
                : std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(n_features)))));
  }

  // Returns the tree; accumulates per-feature weighted impurity decrease.
  DecisionTree build(const std::vector<std::int32_t>& weights, Rng& rng, std::vector<double>& decrease) {
    tree_ = DecisionTree{};
    weights_ = &weights;
    decrease_ = &decrease;
    idx_.clear();
    member_.assign(static_cast<std::size_t>(n_samples_), -1);
    for (Index i = 0; i < n_samples_; ++i)
      if (weights[static_cast<std::size_t>(i)] > 0) idx_.push_back(static_cast<std::int32_t>(i));
    features_.resize(static_cast<std::size_t>(n_features_));
    for (int f = 0; f < n_features_; ++f) features_[static_cast<std::size_t>(f)] = f;

    struct Task {
      std::int32_t node;
      std::size_t begin, end;
      int depth;
    };
    std::vector<Task> stack;
    stack.push_back({new_node(), 0, idx_.size(), 0});
    std::vector<double> counts(static_cast<std::size_t>(n_classes_));
    while (!stack.empty()) {
      Task t = stack.back();
      stack.pop_back();
      std::fill(counts.begin(), counts.end(), 0.0);
      double total = 0;
      for (std::size_t i = t.begin; i < t.end; ++i) {
        const auto s = static_cast<std::size_t>(idx_[i]);
        const double w = weights[s];
        counts[static_cast<std::size_t>(labels_[s])] += w;
        total += w;
      }
      for (int c = 0; c < n_classes_; ++c)
        tree_.value[static_cast<std::size_t>(t.node) * n_classes_ + c] = counts[static_cast<std::size_t>(c)] / total;

      const bool pure =
          std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }) <= 1;
      const bool depth_capped = params_.max_depth && t.depth >= *params_.max_depth;
      if (pure || depth_capped || total < 2.0 * params_.min_samples_leaf) continue;

      Split best = find_split(t.begin, t.end, counts, total, rng);
      if (best.feature < 0) continue;

      const auto mid = partition(t.begin, t.end, best.feature, best.threshold);
      const double parent_sq = sum_sq(counts) / total;
      // total*gini(parent) - nl*gini(left) - nr*gini(right) == score - parent_sq
      (*decrease_)[static_cast<std::size_t>(best.feature)] += best.score - parent_sq;

      const auto k = static_cast<std::size_t>(t.node);
      tree_.feature[k] = best.feature;
      tree_.threshold[k] = best.threshold;
      const auto l = new_node();
      const auto r = new_node();
      tree_.left[k] = l;
      tree_.right[k] = r;
      stack.push_back({r, mid, t.end, t.depth + 1});
      stack.push_back({l, t.begin, mid, t.depth + 1});
    }
    return std::move(tree_);
  }

 private:
  struct Split {
    std::int32_t feature = -1;
    double threshold = 0.0;
    double score = -1.0;  // sum_c nl_c^2/nl + sum_c nr_c^2/nr, larger is better
  };

  static double sum_sq(const std::vector<double>& c) {
    double s = 0;
    for (double v : c) s += v * v;
    return s;
  }

  std::int32_t new_node() {
    tree_.feature.push_back(-1);
    tree_.threshold.push_back(0.0);
    tree_.left.push_back(-1);
    tree_.right.push_back(-1);
    tree_.value.resize(tree_.value.size() + static_cast<std::size_t>(n_classes_), 0.0);
    return static_cast<std::int32_t>(tree_.feature.size() - 1);
  }

  const float* column(int f) const {
    return columns_.data() + static_cast<std::size_t>(f) * static_cast<std::size_t>(n_samples_);
  }

  Split find_split(std::size_t begin, std::size_t end, const std::vector<double>& counts,
                   double total, Rng& rng) {
    Split best;
    std::vector<double> left(static_cast<std::size_t>(n_classes_));
    int evaluated = 0;
    // Large nodes read the forest-wide presorted column and filter by
    // membership; small nodes sort their own values.
    const std::size_t n_node = end - begin;
    const bool scan = static_cast<double>(n_node) * std::log2(static_cast<double>(n_node) + 1.0) >
                      static_cast<double>(n_samples_);
    if (scan) {
      ++tag_;
      for (std::size_t i = begin; i < end; ++i) member_[static_cast<std::size_t>(idx_[i])] = tag_;
    }
    // Partial Fisher-Yates over the feature list; keep drawing past mtry until
    // some valid partition exists.
    for (int drawn = 0; drawn < n_features_; ++drawn) {
      if (evaluated >= mtry_ && best.feature >= 0) break;
      std::uniform_int_distribution<int> pick(drawn, n_features_ - 1);
      std::swap(features_[static_cast<std::size_t>(drawn)],
                features_[static_cast<std::size_t>(pick(rng))]);
      const int f = features_[static_cast<std::size_t>(drawn)];
      const float* col = column(f);

      entries_.clear();
      if (scan) {
        const std::int32_t* order = sorted_.data() + static_cast<std::size_t>(f) * static_cast<std::size_t>(n_samples_);
        for (Index r = 0; r < n_samples_; ++r) {
          const auto s = static_cast<std::size_t>(order[r]);
          if (member_[s] == tag_) entries_.push_back({col[s], labels_[s], (*weights_)[s]});
        }
      } else {
        for (std::size_t i = begin; i < end; ++i) {
          const auto s = idx_[i];
          entries_.push_back({col[s], labels_[static_cast<std::size_t>(s)], (*weights_)[static_cast<std::size_t>(s)]});
        }
        std::sort(entries_.begin(), entries_.end(),
                  [](const Entry& a, const Entry& b) { return a.value < b.value; });
      }
      if (entries_.front().value == entries_.back().value) continue;  // constant here
      ++evaluated;

      std::fill(left.begin(), left.end(), 0.0);
      double nl = 0;
      double left_sq = 0;  // sum_c left_c^2
      double right_sq = sum_sq(counts);
      for (std::size_t i = 0; i + 1 < entries_.size(); ++i) {
        const auto c = static_cast<std::size_t>(entries_[i].label);
        const double w = entries_[i].weight;
        const double r_old = counts[c] - left[c];
        left_sq += (2.0 * left[c] + w) * w;
        right_sq += (w - 2.0 * r_old) * w;
        left[c] += w;
        nl += w;
        if (entries_[i].value == entries_[i + 1].value) continue;
        const double nr = total - nl;
        if (nl < params_.min_samples_leaf || nr < params_.min_samples_leaf) continue;
        const double score = left_sq / nl + right_sq / nr;
        const double thr = 0.5 * (static_cast<double>(entries_[i].value) +
                                  static_cast<double>(entries_[i + 1].value));
        if (score > best.score ||
            (score == best.score && (f < best.feature || (f == best.feature && thr < best.threshold)))) {
          best = {f, thr, score};
        }
      }
    }
    return best;
  }

  std::size_t partition(std::size_t begin, std::size_t end, int feature, double threshold) {
    const float* col = column(feature);
    auto it = std::stable_partition(idx_.begin() + static_cast<std::ptrdiff_t>(begin),
                                    idx_.begin() + static_cast<std::ptrdiff_t>(end),
                                    [&](std::int32_t s) { return static_cast<double>(col[s]) <= threshold; });
    return static_cast<std::size_t>(it - idx_.begin());
  }

  const std::vector<float>& columns_;
  const std::vector<std::int32_t>& sorted_;
  Index n_samples_;
  int n_features_;
  std::span<const int> labels_;
  int n_classes_;
  const ForestParams& params_;
  int mtry_ = 1;

  DecisionTree tree_;
  const std::vector<std::int32_t>* weights_ = nullptr;
  std::vector<double>* decrease_ = nullptr;
  std::vector<std::int32_t> idx_;
  std::vector<std::int32_t> member_;
  std::int32_t tag_ = 0;
  std::vector<int> features_;
  std::vector<Entry> entries_;
};

struct TreeResult {
  DecisionTree tree;
  std::vector<double> decrease;
  std::vector<std::int32_t> oob_rows;
  std::vector<double> oob_proba;  // oob_rows.size() x n_classes
};

int resolve_threads(int requested, int n_trees) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  return std::clamp(n, 1, n_trees);
}

}  // namespace

ForestModel fit_forest(const MatrixF& z, std::span<const int> labels, int n_classes,
                       const ForestParams& params) {
  params.validate();
  const Index n = z.rows();
  const int c = static_cast<int>(z.cols());
  if (n < 2) throw DataError("random forest needs at least two samples");
  if (c < 1) throw DataError("random forest needs at least one feature");
  if (static_cast<Index>(labels.size()) != n) throw DataError("label count does not match rows");
  if (n_classes < 2) throw DataError("random forest needs at least two classes");
  std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
  for (int l : labels) {
    if (l < 0 || l >= n_classes) throw DataError("label out of range");
    seen[static_cast<std::size_t>(l)] = 1;
  }
  if (std::count(seen.begin(), seen.end(), 1) < 2)
    throw DataError("all labels are identical; attribute prediction is undefined");

  // Feature-major copy so each split scan reads one contiguous column.
  std::vector<float> columns(static_cast<std::size_t>(n) * static_cast<std::size_t>(c));
  for (Index i = 0; i < n; ++i)
    for (int f = 0; f < c; ++f)
      columns[static_cast<std::size_t>(f) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)] = z(i, f);

  std::vector<std::int32_t> sorted(columns.size());
  for (int f = 0; f < c; ++f) {
    auto first = sorted.begin() + static_cast<std::ptrdiff_t>(f) * n;
    std::iota(first, first + n, 0);
    const float* col = columns.data() + static_cast<std::size_t>(f) * static_cast<std::size_t>(n);
    std::stable_sort(first, first + n, [col](std::int32_t a, std::int32_t b) { return col[a] < col[b]; });
  }

  std::vector<TreeResult> results(static_cast<std::size_t>(params.n_trees));
  std::atomic<int> next{0};
  auto worker = [&] {
    TreeBuilder builder(columns, sorted, n, c, labels, n_classes, params);
    std::vector<std::int32_t> weights(static_cast<std::size_t>(n));
    for (int t = next++; t < params.n_trees; t = next++) {
      Rng rng = make_rng(params.seed, "forest.tree", static_cast<std::uint64_t>(t));
      std::fill(weights.begin(), weights.end(), 0);
      std::uniform_int_distribution<Index> draw(0, n - 1);
      for (Index i = 0; i < n; ++i) ++weights[static_cast<std::size_t>(draw(rng))];
      auto& r = results[static_cast<std::size_t>(t)];
      r.decrease.assign(static_cast<std::size_t>(c), 0.0);
      r.tree = builder.build(weights, rng, r.decrease);
      for (Index i = 0; i < n; ++i) {
        if (weights[static_cast<std::size_t>(i)] != 0) continue;
        r.oob_rows.push_back(static_cast<std::int32_t>(i));
        const auto leaf = static_cast<std::size_t>(r.tree.leaf(z.row(i)));
        for (int k = 0; k < n_classes; ++k)
          r.oob_proba.push_back(r.tree.value[leaf * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(k)]);
      }
    }
  };
  const int n_threads = resolve_threads(params.n_threads, params.n_trees);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  }

  ForestModel model;
  model.n_features = c;
  model.n_classes = n_classes;
  model.importances = VectorD::Zero(c);
  MatrixD oob = MatrixD::Zero(n, n_classes);
  std::vector<int> oob_votes(static_cast<std::size_t>(n), 0);
  for (auto& r : results) {
    double tree_total = 0;
    for (double d : r.decrease) tree_total += d;
    if (tree_total > 0)
      for (int f = 0; f < c; ++f) model.importances(f) += r.decrease[static_cast<std::size_t>(f)] / tree_total;
    for (std::size_t j = 0; j < r.oob_rows.size(); ++j) {
      const auto row = r.oob_rows[j];
      ++oob_votes[static_cast<std::size_t>(row)];
      for (int k = 0; k < n_classes; ++k)
        oob(row, k) += r.oob_proba[j * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(k)];
    }
    model.trees.push_back(std::move(r.tree));
  }
  const double imp_total = model.importances.sum();
  if (imp_total > 0) {
    model.importances /= imp_total;
  } else {
    // No tree ever split; every feature is equally (un)informative.
    model.importances.setConstant(1.0 / c);
  }

  int scored = 0, correct = 0;
  for (Index i = 0; i < n; ++i) {
    if (oob_votes[static_cast<std::size_t>(i)] == 0) continue;
    ++scored;
    Index best = 0;
    oob.row(i).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  model.oob_accuracy = scored > 0 ? static_cast<double>(correct) / scored : 0.0;
  return model;
}

ForestModel fit_forest(const EmbeddingMatrix& z, const AttributeTable& y, const ForestParams& params) {
  check_paired(z, y);
  z.validate();
  return fit_forest(z.data, y.labels, y.n_attributes(), params);
}

MatrixD predict_proba(const ForestModel& model, const MatrixF& z) {
  if (z.cols() != model.n_features)
    throw DataError("model expects " + std::to_string(model.n_features) + " features, got " +
                    std::to_string(z.cols()));
  MatrixD out = MatrixD::Zero(z.rows(), model.n_classes);
  const auto nc = static_cast<std::size_t>(model.n_classes);
  for (Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    for (const auto& tree : model.trees) {
      const auto leaf = static_cast<std::size_t>(tree.leaf(row));
      for (std::size_t k = 0; k < nc; ++k) out(i, static_cast<Index>(k)) += tree.value[leaf * nc + k];
    }
  }
  out /= static_cast<double>(model.trees.size());
  return out;
}

VectorD confidence(const MatrixD& proba) { return proba.rowwise().maxCoeff(); }

std::vector<int> argmax_rows(const MatrixD& proba) {
  std::vector<int> out(static_cast<std::size_t>(proba.rows()));
  for (Index i = 0; i < proba.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < proba.cols(); ++k)
      if (proba(i, k) > proba(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

const VectorD& feature_importance(const ForestModel& model) { return model.importances; }

namespace {

constexpr char kForestMagic[4] = {'R', 'F', 'O', '1'};
constexpr std::uint32_t kForestVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("truncated RFO1 container");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_forest(const ForestModel& model) {
  std::vector<std::uint8_t> out(kForestMagic, kForestMagic + 4);
  put<std::uint32_t>(out, kForestVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.n_features));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.n_classes));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.trees.size()));
  put<double>(out, model.oob_accuracy);
  for (Index f = 0; f < model.n_features; ++f) put<double>(out, model.importances(f));
  for (const auto& t : model.trees) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.n_nodes()));
    for (std::size_t k = 0; k < t.n_nodes(); ++k) {
      put<std::int32_t>(out, t.feature[k]);
      put<double>(out, t.threshold[k]);
      put<std::int32_t>(out, t.left[k]);
      put<std::int32_t>(out, t.right[k]);
      for (int c = 0; c < model.n_classes; ++c)
        put<double>(out, t.value[k * static_cast<std::size_t>(model.n_classes) + static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

ForestModel decode_forest(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kForestMagic, 4) != 0)
    throw FormatError("bad magic (expected RFO1)");
  Reader in(bytes.subspan(4));
  if (in.get<std::uint32_t>() != kForestVersion) throw FormatError("unsupported RFO1 version");
  ForestModel m;
  m.n_features = static_cast<int>(in.get<std::uint32_t>());
  m.n_classes = static_cast<int>(in.get<std::uint32_t>());
  const auto n_trees = in.get<std::uint32_t>();
  m.oob_accuracy = in.get<double>();
  m.importances.resize(m.n_features);
  for (int f = 0; f < m.n_features; ++f) m.importances(f) = in.get<double>();
  for (std::uint32_t t = 0; t < n_trees; ++t) {
    DecisionTree tree;
    const auto nodes = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < nodes; ++k) {
      tree.feature.push_back(in.get<std::int32_t>());
      tree.threshold.push_back(in.get<double>());
      tree.left.push_back(in.get<std::int32_t>());
      tree.right.push_back(in.get<std::int32_t>());
      for (int c = 0; c < m.n_classes; ++c) tree.value.push_back(in.get<double>());
      const auto l = tree.left.back(), r = tree.right.back();
      if (tree.feature.back() >= 0 &&
          (l <= static_cast<std::int32_t>(k) || r <= static_cast<std::int32_t>(k) ||
           l >= static_cast<std::int32_t>(nodes) || r >= static_cast<std::int32_t>(nodes)))
        throw FormatError("corrupt child index in RFO1 tree");
    }
    m.trees.push_back(std::move(tree));
  }
  if (!in.done()) throw FormatError("trailing bytes in RFO1 container");
  m.validate();
  return m;
}

void save_forest(const ForestModel& model, const std::filesystem::path& path) {
  const auto bytes = encode_forest(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ForestModel load_forest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_forest(bytes);
}

}  // namespace sfid
