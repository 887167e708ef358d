#include "evaluate.hpp"

#include "sfid/baselines.hpp"
#include "sfid/imputation.hpp"
#include "sfid/synthlab.hpp"
#include "sfid/tasks.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <charconv>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace sfid;
using namespace sfid::cli;
using ojson = nlohmann::ordered_json;

namespace {

std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    T v{};
    const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size())
      throw ConfigError(std::string("bad ") + what + " entry '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::vector<std::string> split_on(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

DearLambdas parse_lambdas(const std::string& text) {
  std::string t = text;
  std::replace(t.begin(), t.end(), '/', ',');
  const auto v = parse_list<double>(t, "lambda");
  if (v.size() != 3) throw ConfigError("lambdas take three values, e.g. 1,1,1");
  return {v[0], v[1], v[2]};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

ojson file_entry(const fs::path& path) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash_file(path)));
  return {{"path", path.string()}, {"fnv1a64", hex}};
}

// Optional tensor view of a flattened EMB1 input.
struct TensorOpts {
  std::string layout;
  std::string shape;

  bool active() const { return !layout.empty(); }
  std::vector<Index> inner() const {
    auto dims = parse_list<long long>(shape, "shape");
    if (dims.empty()) throw ConfigError("--shape is required with --layout");
    return {dims.begin(), dims.end()};
  }
  void add(CLI::App* app) {
    app->add_option("--layout", layout, "Input is a flattened tensor: nsc or nchw");
    app->add_option("--shape", shape, "Non-sample dims of the tensor, e.g. 16,512 or 512,7,7");
  }
};

EmbeddingMatrix load_2d(const std::string& path, const TensorOpts& t) {
  auto m = read_embeddings(path);
  if (!t.active()) return m;
  const auto inner = t.inner();
  auto reduced = reduce_to_2d(tensor_from_matrix(m, parse_layout(t.layout), inner));
  reduced.source_tag = m.source_tag;
  return reduced;
}

// ---------------------------------------------------------------------------
// Fit

struct FitOpts {
  std::string method = "sfid";
  std::string train_emb, train_attr, val_emb, out, forest_out, attributes;
  double val_fraction = 0.25;
  std::optional<long long> k;
  double tau = 0.7;
  std::string mode = "lc";
  std::string target;
  double hc_tau = 0.9;
  std::optional<double> fallback_quantile;
  int trees = 100;
  std::optional<int> max_depth;
  int min_leaf = 1;
  int mtry = 0;
  int bins = 64;
  std::string impute = "zero";
  std::string lambdas = "1,1,1";
  int epochs = 200;
  double step = 1e-3;
  TensorOpts tensor;
};

void add_fit_options(CLI::App* app, FitOpts& o, bool with_output) {
  app->add_option("--method", o.method, "sfid, clipclip or dear")->check(CLI::IsMember({"sfid", "clipclip", "dear"}));
  app->add_option("--train-emb", o.train_emb, "Training embeddings (EMB1)")->required();
  app->add_option("--train-attr", o.train_attr, "Training attribute labels")->required();
  app->add_option("--val-emb", o.val_emb, "Validation embeddings for the confidence set (sfid)");
  app->add_option("--val-fraction", o.val_fraction, "Held-out share of the training file when --val-emb is absent");
  app->add_option("--attributes", o.attributes, "Comma-separated attribute names fixing the id order");
  app->add_option("--k", o.k, "Features to impute (default 50, clipclip 60)");
  app->add_option("--tau", o.tau, "Low-confidence threshold");
  app->add_option("--mode", o.mode, "lc, hc, zero, gauss or drop");
  app->add_option("--target", o.target, "Target attribute for hc mode");
  app->add_option("--hc-tau", o.hc_tau, "High-confidence threshold");
  app->add_option("--fallback-quantile", o.fallback_quantile,
                  "Use the least confident fraction when no sample is below tau");
  app->add_option("--trees", o.trees, "Random forest size");
  app->add_option("--max-depth", o.max_depth, "Tree depth limit");
  app->add_option("--min-leaf", o.min_leaf, "Minimum samples per leaf");
  app->add_option("--mtry", o.mtry, "Features tried per split (0 = sqrt)");
  app->add_option("--bins", o.bins, "Equal-frequency bins for mutual information");
  app->add_option("--impute", o.impute, "clipclip fill: zero or drop")->check(CLI::IsMember({"zero", "drop"}));
  app->add_option("--lambda", o.lambdas, "DeAR weights l1,l2,l3");
  app->add_option("--epochs", o.epochs, "DeAR epochs per stage");
  app->add_option("--step", o.step, "DeAR step size");
  o.tensor.add(app);
  if (with_output) {
    app->add_option("--out", o.out, "Model JSON to write")->required();
    app->add_option("--forest-out", o.forest_out, "Also save the sfid forest (RFO1)");
  }
}

struct FitData {
  EmbeddingMatrix train;
  AttributeTable train_y;
  EmbeddingMatrix val;
};

FitData load_fit_data(const FitOpts& o, std::uint64_t seed) {
  FitData d;
  d.train = load_2d(o.train_emb, o.tensor);
  if (o.attributes.empty()) {
    d.train_y = read_attributes(o.train_attr);
  } else {
    std::vector<std::string> names;
    std::stringstream ss(o.attributes);
    for (std::string s; std::getline(ss, s, ',');) names.push_back(s);
    d.train_y = read_attributes(o.train_attr, &names);
  }
  check_paired(d.train, d.train_y);
  if (!o.val_emb.empty() || o.method != "sfid") {
    if (!o.val_emb.empty()) d.val = load_2d(o.val_emb, o.tensor);
    return d;
  }
  if (!(o.val_fraction > 0 && o.val_fraction < 1)) throw ConfigError("--val-fraction must lie in (0, 1)");
  const Index n = d.train.n_samples();
  const auto n_val = static_cast<Index>(std::floor(static_cast<double>(n) * o.val_fraction));
  if (n_val < 1 || n - n_val < 2) throw DataError("too few rows to split off a validation set");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng = make_rng(seed, "fit.split");
  std::shuffle(order.begin(), order.end(), rng);
  std::sort(order.begin(), order.begin() + n_val);
  std::sort(order.begin() + n_val, order.end());
  MatrixF val(n_val, d.train.n_features()), tr(n - n_val, d.train.n_features());
  AttributeTable ty;
  ty.attribute_names = d.train_y.attribute_names;
  ty.attribute_column = d.train_y.attribute_column;
  for (Index i = 0; i < n_val; ++i) val.row(i) = d.train.data.row(order[static_cast<std::size_t>(i)]);
  for (Index i = n_val; i < n; ++i) {
    const Index src = order[static_cast<std::size_t>(i)];
    tr.row(i - n_val) = d.train.data.row(src);
    ty.labels.push_back(d.train_y.labels[static_cast<std::size_t>(src)]);
  }
  d.val = EmbeddingMatrix(std::move(val), d.train.source_tag);
  d.train = EmbeddingMatrix(std::move(tr), d.train.source_tag);
  d.train_y = std::move(ty);
  return d;
}

SfidParams sfid_params(const FitOpts& o, const AttributeTable& y, std::uint64_t seed, int threads) {
  SfidParams p;
  p.k = o.k.value_or(50);
  p.tau = o.tau;
  p.mode = parse_mode(o.mode);
  if (p.mode == ImputeMode::HC) {
    if (o.target.empty()) throw ConfigError("hc mode needs --target");
    p.target_attribute = y.attribute_id(o.target);
  }
  p.hc_tau = o.hc_tau;
  p.fallback_quantile = o.fallback_quantile;
  p.forest.n_trees = o.trees;
  p.forest.max_depth = o.max_depth;
  p.forest.min_samples_leaf = o.min_leaf;
  p.forest.features_per_split = o.mtry;
  p.forest.seed = derive_seed(seed, "fit.forest");
  p.forest.n_threads = threads;
  return p;
}

ojson run_manifest(const std::string& command, const FitOpts& o, std::uint64_t seed) {
  ojson m;
  m["command"] = command;
  m["seed"] = seed;
  m["method"] = o.method;
  ojson inputs;
  inputs["train_emb"] = file_entry(o.train_emb);
  inputs["train_attr"] = file_entry(o.train_attr);
  if (!o.val_emb.empty()) inputs["val_emb"] = file_entry(o.val_emb);
  m["inputs"] = inputs;
  if (o.tensor.active()) m["tensor"] = {{"layout", o.tensor.layout}, {"shape", o.tensor.shape}};
  return m;
}

// Fits the configured method. `forest` (sfid only) is reused when present.
AnyModel fit_model(const FitOpts& o, const FitData& d, std::uint64_t seed, int threads,
                   const ForestModel* forest = nullptr, ForestModel* forest_out = nullptr) {
  if (o.method == "sfid") {
    const auto p = sfid_params(o, d.train_y, seed, threads);
    SfidFit fit = forest ? fit_sfid_with_forest(*forest, d.train_y.attribute_names, d.val, [&] {
      auto q = p;
      q.dataset_tag = d.train.source_tag;
      return q;
    }())
                         : fit_sfid_detailed(d.train, d.train_y, d.val, p);
    if (forest_out) *forest_out = std::move(fit.forest);
    return std::move(fit.model);
  }
  if (o.method == "clipclip")
    return fit_clipclip(d.train, d.train_y, o.k.value_or(60), o.impute == "drop" ? ClipImpute::DROP : ClipImpute::ZERO,
                        o.bins);
  DearTraining t;
  t.epochs = o.epochs;
  t.step_size = o.step;
  t.seed = derive_seed(seed, "fit.dear");
  return fit_dear(d.train, d.train_y, parse_lambdas(o.lambdas), t);
}

std::string model_json(AnyModel& model, ojson manifest) {
  if (auto* m = std::get_if<DebiasModel>(&model)) {
    manifest["k"] = m->k;
    manifest["tau"] = m->tau;
    m->provenance["run"] = std::move(manifest);
    return debias_model_to_json(*m);
  }
  auto& r = std::get<ResidualModel>(model);
  manifest["lambdas"] = {r.lambdas.reconstruction, r.lambdas.confidence, r.lambdas.adversarial};
  r.provenance["run"] = std::move(manifest);
  return residual_model_to_json(r);
}

// ---------------------------------------------------------------------------
// Eval inputs shared by eval, sweep and compare

struct TaskInputs {
  std::string images, labels, prototypes, image_attr, texts, truth;
  std::string image_model, text_model;
  std::string definition = "recall";
  long long depth = 100;
  std::string recall_k = "1,5,10";
  int bootstrap = 0;

  void add_zeroshot(CLI::App* app, bool required) {
    auto* a = app->add_option("--images", images, "Image embeddings (EMB1)");
    auto* b = app->add_option("--labels", labels, "Attribute file with a class column");
    auto* c = app->add_option("--prototypes", prototypes, "Class prompt embeddings, one row per class");
    if (required) a->required(), b->required(), c->required();
    app->add_option("--definition", definition, "recall or literal parity")->check(CLI::IsMember({"recall", "literal"}));
  }
  void add_retrieval(CLI::App* app, bool required) {
    // sweep and compare register both tasks on one command
    auto* a = app->get_option_no_throw("--images");
    if (!a) a = app->add_option("--images", images, "Image embeddings (EMB1)");
    auto* b = app->add_option("--image-attr", image_attr, "Image attribute file");
    auto* c = app->add_option("--texts", texts, "Caption embeddings (EMB1)");
    auto* d = app->add_option("--truth", truth, "prompt_id<TAB>image_id");
    if (required) a->required(), b->required(), c->required(), d->required();
    app->add_option("--depth", depth, "Retrieval depth M");
    app->add_option("--recall-k", recall_k, "Comma-separated K values");
  }
  void add_models(CLI::App* app) {
    app->add_option("--image-model", image_model, "Debias model applied to image embeddings");
    app->add_option("--text-model", text_model, "Debias model applied to text embeddings");
  }
  ojson manifest(const std::string& command, std::uint64_t seed) const {
    ojson m{{"command", command}, {"seed", seed}, {"definition", definition}, {"depth", depth},
            {"recall_k", recall_k}, {"bootstrap", bootstrap}};
    ojson inputs = ojson::object();
    const std::pair<const char*, const std::string*> files[] = {
        {"images", &images}, {"labels", &labels},           {"prototypes", &prototypes}, {"image_attr", &image_attr},
        {"texts", &texts},   {"truth", &truth},             {"image_model", &image_model},
        {"text_model", &text_model}};
    for (const auto& [name, path] : files)
      if (!path->empty()) inputs[name] = file_entry(*path);
    m["inputs"] = std::move(inputs);
    return m;
  }
  EvalOptions options(std::uint64_t seed) const {
    EvalOptions o;
    o.definition = parse_dp_definition(definition);
    o.depth = depth;
    const auto ks = parse_list<long long>(recall_k, "recall-k");
    o.recall_k.assign(ks.begin(), ks.end());
    o.bootstrap = bootstrap;
    o.seed = seed;
    return o;
  }
};


enum class Task { ZEROSHOT, RETRIEVAL };

Task parse_task(const std::string& s) {
  if (s == "zeroshot") return Task::ZEROSHOT;
  if (s == "retrieval") return Task::RETRIEVAL;
  throw ConfigError("sweeps and comparisons support the zeroshot and retrieval tasks, not '" + s + "'");
}

struct LoadedTask {
  Task task;
  ZeroShotData zs;
  RetrievalData rt;
};

LoadedTask load_task(Task task, const TaskInputs& in) {
  LoadedTask t{task, {}, {}};
  if (task == Task::ZEROSHOT) {
    t.zs.images = read_embeddings(in.images);
    t.zs.labels = read_attributes(in.labels);
    t.zs.prototypes = read_embeddings(in.prototypes);
  } else {
    t.rt.images = read_embeddings(in.images);
    t.rt.image_attributes = read_attributes(in.image_attr);
    t.rt.texts = read_embeddings(in.texts);
    t.rt.truth = read_truth(in.truth);
  }
  return t;
}

// Evaluates after debiasing images (and texts/prototypes when a text model is given).
MetricReport evaluate(const LoadedTask& t, const EvalOptions& opt, const AnyModel* image_model,
                      const AnyModel* text_model, std::vector<RankedList>* rankings = nullptr) {
  if (t.task == Task::ZEROSHOT) {
    ZeroShotData d = t.zs;
    if (image_model) d.images = apply_any(*image_model, d.images);
    if (text_model) d.prototypes = apply_any(*text_model, d.prototypes);
    return eval_zeroshot(d, opt);
  }
  RetrievalData d = t.rt;
  if (image_model) d.images = apply_any(*image_model, d.images);
  if (text_model) d.texts = apply_any(*text_model, d.texts);
  return eval_retrieval(d, opt, rankings);
}

// Metrics keyed by name, plus a "run" entry recording how to reproduce them.
void emit_report(const MetricReport& report, const std::string& out, const ojson& run) {
  if (!out.empty()) {
    auto j = ojson::parse(report.to_json());
    j["run"] = run;
    write_text(out, j.dump(2) + "\n");
  }
  std::cout << report.to_table();
}

// ---------------------------------------------------------------------------
// Grid runs (sweep and compare)

struct Variant {
  std::string label;
  FitOpts fit;
  bool identity = false;
};

struct GridRow {
  Variant variant;
  MetricReport report;
};

// Runs every variant in a worker pool; rows come back in variant order.
std::vector<GridRow> run_grid(const std::vector<Variant>& variants, const FitOpts& base, const LoadedTask& task,
                              const EvalOptions& opt, std::uint64_t seed, int threads) {
  if (variants.empty()) throw ConfigError("empty grid: give at least one value per swept parameter");
  const FitData data = load_fit_data(base, seed);
  const int workers = std::max(1, std::min<int>(threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency()),
                                                static_cast<int>(variants.size())));
  // Every sfid variant shares one forest: it depends only on the training data and seed.
  std::optional<ForestModel> forest;
  if (std::any_of(variants.begin(), variants.end(), [](const Variant& v) { return !v.identity && v.fit.method == "sfid"; })) {
    const auto p = sfid_params(base, data.train_y, seed, threads);
    forest = fit_forest(data.train, data.train_y, p.forest);
  }
  std::vector<GridRow> rows(variants.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < variants.size(); i = next++) {
      try {
        const auto& v = variants[i];
        rows[i].variant = v;
        if (v.identity) {
          rows[i].report = evaluate(task, opt, nullptr, nullptr);
        } else {
          const AnyModel model = fit_model(v.fit, data, seed, 1, forest ? &*forest : nullptr);
          rows[i].report = evaluate(task, opt, &model, nullptr);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
  }
  if (failure) std::rethrow_exception(failure);
  return rows;
}

std::string grid_table(const std::vector<GridRow>& rows, bool tsv) {
  std::vector<std::string> metrics;
  for (const auto& r : rows)
    for (const auto& e : r.report.entries)
      if (std::find(metrics.begin(), metrics.end(), e.name) == metrics.end()) metrics.push_back(e.name);
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"variant", "method", "k", "tau", "mode", "lambda"};
  header.insert(header.end(), metrics.begin(), metrics.end());
  cells.push_back(header);
  for (const auto& r : rows) {
    const auto& f = r.variant.fit;
    const bool sfid = f.method == "sfid" && !r.variant.identity;
    std::vector<std::string> row{r.variant.label,
                                 r.variant.identity ? "none" : f.method,
                                 r.variant.identity || f.method == "dear" ? "-" : std::to_string(f.k.value_or(f.method == "sfid" ? 50 : 60)),
                                 sfid ? shortest(f.tau) : "-",
                                 sfid ? f.mode : "-",
                                 !r.variant.identity && f.method == "dear" ? f.lambdas : "-"};
    for (const auto& m : metrics) {
      const auto* e = r.report.find(m);
      if (!e) {
        row.push_back("-");
        continue;
      }
      if (tsv) {
        row.push_back(shortest(e->value));
      } else {
        char buf[64];
        std::snprintf(buf, sizeof buf, e->percent ? "%.2f%%" : "%.4f", e->value * (e->percent ? 100.0 : 1.0));
        row.push_back(buf);
      }
    }
    cells.push_back(std::move(row));
  }
  std::ostringstream out;
  if (tsv) {
    for (const auto& row : cells) {
      for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "\t" : "") << row[c];
      out << '\n';
    }
    return out.str();
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << "  ";
      const auto pad = std::string(width[c] - row[c].size(), ' ');
      out << (c == 0 ? row[c] + pad : pad + row[c]);
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------

int exit_code(const Error& e) {
  const std::string kind = e.kind();
  if (kind == "ConfigError") return 3;
  if (kind == "TrainingError") return 4;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective feature imputation debiasing toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML-style configuration file; flags override it");
  std::uint64_t seed = 0;
  int threads = 0;
  app.add_option("--seed", seed, "Root seed for every random choice");
  app.add_option("--threads", threads, "Worker threads (0 = all cores)");

  // fit
  FitOpts fit_opts;
  auto* fit = app.add_subcommand("fit", "Fit a debiasing model");
  add_fit_options(fit, fit_opts, true);
  fit->callback([&] {
    const FitData data = load_fit_data(fit_opts, seed);
    ForestModel forest;
    AnyModel model = fit_model(fit_opts, data, seed, threads, nullptr, &forest);
    write_text(fit_opts.out, model_json(model, run_manifest("fit", fit_opts, seed)));
    if (!fit_opts.forest_out.empty()) {
      if (fit_opts.method != "sfid") throw ConfigError("--forest-out only applies to sfid");
      save_forest(forest, fit_opts.forest_out);
    }
  });

  // apply
  std::string apply_model, apply_in, apply_out;
  std::optional<std::uint64_t> noise_seed;
  TensorOpts apply_tensor;
  auto* apply = app.add_subcommand("apply", "Apply a fitted model to embeddings");
  apply->add_option("--model", apply_model, "Model JSON")->required();
  apply->add_option("--in", apply_in, "Input embeddings (EMB1)")->required();
  apply->add_option("--out", apply_out, "Output embeddings (EMB1)")->required();
  apply->add_option("--noise-seed", noise_seed, "Override the GAUSS noise seed");
  apply_tensor.add(apply);
  apply->callback([&] {
    const AnyModel model = load_any_model(apply_model);
    const auto in = read_embeddings(apply_in);
    if (apply_tensor.active()) {
      const auto* m = std::get_if<DebiasModel>(&model);
      if (!m) throw ConfigError("tensor inputs take imputation models only");
      const auto t = tensor_from_matrix(in, parse_layout(apply_tensor.layout), apply_tensor.inner());
      write_embeddings(matrix_from_tensor(apply_debias_tensor(*m, t, noise_seed)), apply_out);
      return;
    }
    if (const auto* m = std::get_if<DebiasModel>(&model))
      write_embeddings(apply_debias(*m, in, noise_seed), apply_out);
    else
      write_embeddings(apply_any(model, in), apply_out);
  });

  // eval
  auto* eval = app.add_subcommand("eval", "Compute fairness and utility metrics");
  eval->require_subcommand(1);
  TaskInputs eval_in;
  std::string eval_out, rankings_out, caption_file, generation_file;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--out", eval_out, "Report JSON to write");
    sub->add_option("--bootstrap", eval_in.bootstrap, "Bootstrap iterations for confidence intervals");
  };
  auto* ev_zs = eval->add_subcommand("zeroshot", "Zero-shot classification parity");
  eval_in.add_zeroshot(ev_zs, true);
  eval_in.add_models(ev_zs);
  common(ev_zs);
  ev_zs->callback([&] {
    const auto t = load_task(Task::ZEROSHOT, eval_in);
    std::optional<AnyModel> im, tm;
    if (!eval_in.image_model.empty()) im = load_any_model(eval_in.image_model);
    if (!eval_in.text_model.empty()) tm = load_any_model(eval_in.text_model);
    emit_report(evaluate(t, eval_in.options(seed), im ? &*im : nullptr, tm ? &*tm : nullptr), eval_out,
                eval_in.manifest("eval zeroshot", seed));
  });
  auto* ev_rt = eval->add_subcommand("retrieval", "Text-to-image retrieval skew and recall");
  eval_in.add_retrieval(ev_rt, true);
  eval_in.add_models(ev_rt);
  ev_rt->add_option("--rankings-out", rankings_out, "Write ranked lists as TSV");
  common(ev_rt);
  ev_rt->callback([&] {
    const auto t = load_task(Task::RETRIEVAL, eval_in);
    std::optional<AnyModel> im, tm;
    if (!eval_in.image_model.empty()) im = load_any_model(eval_in.image_model);
    if (!eval_in.text_model.empty()) tm = load_any_model(eval_in.text_model);
    std::vector<RankedList> lists;
    emit_report(evaluate(t, eval_in.options(seed), im ? &*im : nullptr, tm ? &*tm : nullptr, &lists), eval_out,
                eval_in.manifest("eval retrieval", seed));
    if (!rankings_out.empty()) write_rankings(lists, rankings_out);
  });
  auto* ev_cap = eval->add_subcommand("caption", "Caption gender mismatch and METEOR");
  ev_cap->add_option("--captions", caption_file, "image_id<TAB>true_gender<TAB>caption<TAB>reference")->required();
  common(ev_cap);
  ev_cap->callback([&] {
    auto run = eval_in.manifest("eval caption", seed);
    run["inputs"]["captions"] = file_entry(caption_file);
    emit_report(eval_caption(read_captions(caption_file), eval_in.options(seed)), eval_out, run);
  });
  auto* ev_gen = eval->add_subcommand("generation", "Generated-image gender mismatch and skew");
  ev_gen->add_option("--labels", generation_file,
                     "prompt_id<TAB>profession<TAB>prompt_gender<TAB>detected_gender<TAB>run_seed")
      ->required();
  common(ev_gen);
  ev_gen->callback([&] {
    auto run = eval_in.manifest("eval generation", seed);
    run["inputs"]["labels"] = file_entry(generation_file);
    emit_report(eval_generation(read_generation(generation_file), eval_in.options(seed)), eval_out, run);
  });

  // importance-curve
  std::string curve_forest, curve_out;
  FitOpts curve_fit;
  auto* curve = app.add_subcommand("importance-curve", "Sorted feature importances for choosing k");
  curve->add_option("--forest", curve_forest, "Saved forest (RFO1)");
  curve->add_option("--train-emb", curve_fit.train_emb, "Fit a forest from these embeddings instead");
  curve->add_option("--train-attr", curve_fit.train_attr, "Attribute labels for --train-emb");
  curve->add_option("--trees", curve_fit.trees, "Random forest size");
  curve->add_option("--out", curve_out, "rank<TAB>importance output")->required();
  curve->callback([&] {
    ForestModel forest;
    if (!curve_forest.empty()) {
      forest = load_forest(curve_forest);
    } else {
      if (curve_fit.train_emb.empty() || curve_fit.train_attr.empty())
        throw ConfigError("give --forest or both --train-emb and --train-attr");
      const auto z = read_embeddings(curve_fit.train_emb);
      const auto y = read_attributes(curve_fit.train_attr);
      ForestParams p;
      p.n_trees = curve_fit.trees;
      p.seed = derive_seed(seed, "fit.forest");
      p.n_threads = threads;
      forest = fit_forest(z, y, p);
    }
    std::vector<double> imp(forest.importances.data(), forest.importances.data() + forest.importances.size());
    std::stable_sort(imp.begin(), imp.end(), std::greater<>());
    std::ostringstream out;
    out << "rank\timportance\n";
    for (std::size_t r = 0; r < imp.size(); ++r) out << r + 1 << '\t' << shortest(imp[r]) << '\n';
    write_text(curve_out, out.str());
  });

  // sweep and compare
  FitOpts grid_fit;
  TaskInputs grid_in;
  std::string grid_task = "zeroshot", grid_out, k_grid, tau_grid, mode_grid, lambda_grid, methods = "none,sfid,clipclip,dear";
  auto grid_common = [&](CLI::App* sub) {
    add_fit_options(sub, grid_fit, false);
    sub->add_option("--task", grid_task, "zeroshot or retrieval");
    sub->add_option("--out", grid_out, "Tab-separated result table");
    grid_in.add_zeroshot(sub, false);
    grid_in.add_retrieval(sub, false);
  };
  auto* sweep = app.add_subcommand("sweep", "Evaluate a grid of k, tau, mode or lambda values");
  grid_common(sweep);
  sweep->add_option("--k-grid", k_grid, "Comma-separated k values");
  sweep->add_option("--tau-grid", tau_grid, "Comma-separated tau values");
  sweep->add_option("--mode-grid", mode_grid, "Comma-separated imputation modes");
  sweep->add_option("--lambda-grid", lambda_grid, "Semicolon-separated DeAR weight triples, e.g. 1,1,1;1,0,0");
  sweep->callback([&] {
    const auto ks = k_grid.empty() ? std::vector<long long>{} : parse_list<long long>(k_grid, "k-grid");
    const auto taus = tau_grid.empty() ? std::vector<double>{} : parse_list<double>(tau_grid, "tau-grid");
    const auto modes = split_on(mode_grid, ',');
    const auto lambdas = split_on(lambda_grid, ';');
    if (ks.empty() && taus.empty() && modes.empty() && lambdas.empty())
      throw ConfigError("empty grid: give at least one of --k-grid, --tau-grid, --mode-grid, --lambda-grid");
    std::vector<Variant> variants;
    const std::vector<std::optional<long long>> kv = ks.empty() ? std::vector<std::optional<long long>>{grid_fit.k}
                                                                : std::vector<std::optional<long long>>(ks.begin(), ks.end());
    const std::vector<double> tv = taus.empty() ? std::vector<double>{grid_fit.tau} : taus;
    const std::vector<std::string> mv = modes.empty() ? std::vector<std::string>{grid_fit.mode} : modes;
    const std::vector<std::string> lv = lambdas.empty() ? std::vector<std::string>{grid_fit.lambdas} : lambdas;
    for (const auto& k : kv)
      for (double tau : tv)
        for (const auto& mode : mv)
          for (const auto& lam : lv) {
            Variant v;
            v.fit = grid_fit;
            v.fit.k = k;
            v.fit.tau = tau;
            v.fit.mode = mode;
            v.fit.lambdas = lam;
            v.label = "p" + std::to_string(variants.size());
            variants.push_back(std::move(v));
          }
    const auto task = load_task(parse_task(grid_task), grid_in);
    const auto rows = run_grid(variants, grid_fit, task, grid_in.options(seed), seed, threads);
    if (!grid_out.empty()) write_text(grid_out, grid_table(rows, true));
    std::cout << grid_table(rows, false);
  });
  auto* compare = app.add_subcommand("compare", "Side-by-side table of debiasing methods");
  grid_common(compare);
  compare->add_option("--methods", methods, "Comma-separated: none, sfid, clipclip, dear");
  compare->callback([&] {
    std::vector<Variant> variants;
    for (const auto& m : split_on(methods, ',')) {
      if (m != "none" && m != "sfid" && m != "clipclip" && m != "dear") throw ConfigError("unknown method '" + m + "'");
      Variant v;
      v.fit = grid_fit;
      v.fit.method = m == "none" ? "sfid" : m;
      v.identity = m == "none";
      v.label = m;
      variants.push_back(std::move(v));
    }
    const auto task = load_task(parse_task(grid_task), grid_in);
    const auto rows = run_grid(variants, grid_fit, task, grid_in.options(seed), seed, threads);
    if (!grid_out.empty()) write_text(grid_out, grid_table(rows, true));
    std::cout << grid_table(rows, false);
  });

  // synth
  std::string synth_kind = "embedding", synth_dir, synth_split = "3000,1000,1000", synth_geometry = "axis";
  synth::SynthConfig scfg;
  synth::RetrievalConfig rcfg;
  long long n_bias = 10;
  double leak = 0.0;
  auto* syn = app.add_subcommand("synth", "Write a synthetic scenario with planted bias");
  syn->add_option("--kind", synth_kind, "embedding or retrieval")->check(CLI::IsMember({"embedding", "retrieval"}));
  syn->add_option("--out-dir", synth_dir, "Output directory")->required();
  syn->add_option("--n", scfg.n_samples, "Samples (embedding) ");
  syn->add_option("--dim", scfg.dim, "Embedding width");
  syn->add_option("--classes", scfg.n_classes, "Downstream classes");
  syn->add_option("--attributes", scfg.n_attributes, "Attribute values");
  syn->add_option("--bias-dims", n_bias, "Size of the planted bias set B");
  syn->add_option("--bias-strength", scfg.bias_strength, "Bias offset beta");
  syn->add_option("--class-strength", scfg.class_strength, "Class signal gamma");
  syn->add_option("--noise", scfg.noise_std, "Isotropic noise sigma");
  syn->add_option("--coupling", scfg.stereotype_coupling, "Attribute-class coupling rho");
  syn->add_option("--geometry", synth_geometry, "axis or rotated")->check(CLI::IsMember({"axis", "rotated"}));
  syn->add_option("--split", synth_split, "Row counts of the train,val,test files");
  syn->add_option("--prototype-leak", leak, "Stereotype leak into class prompts");
  syn->add_option("--images", rcfg.n_images, "Images in the retrieval pool (even)");
  syn->callback([&] {
    fs::create_directories(synth_dir);
    const fs::path dir(synth_dir);
    if (synth_kind == "retrieval") {
      rcfg.dim = scfg.dim;
      rcfg.bias_strength = scfg.bias_strength;
      rcfg.bias_dims = synth::pick_bias_dims(rcfg.dim, n_bias, seed);
      rcfg.seed = seed;
      const auto s = synth::make_retrieval_scenario(rcfg);
      write_embeddings(s.images, dir / "images.emb");
      write_attributes(s.image_attributes, dir / "images.attr");
      write_embeddings(s.texts, dir / "texts.emb");
      write_truth(s.truth, dir / "truth.tsv");
      write_embeddings(s.debias_train, dir / "debias_train.emb");
      write_attributes(s.debias_train_attributes, dir / "debias_train.attr");
      write_embeddings(s.debias_val, dir / "debias_val.emb");
      write_attributes(s.debias_val_attributes, dir / "debias_val.attr");
    } else {
      scfg.geometry = synth_geometry == "rotated" ? synth::BiasGeometry::Rotated : synth::BiasGeometry::Axis;
      scfg.bias_dims = synth::pick_bias_dims(scfg.dim, n_bias, seed);
      scfg.seed = seed;
      const auto sizes = parse_list<long long>(synth_split, "split");
      if (sizes.empty() || sizes.size() > 3) throw ConfigError("--split takes one to three row counts");
      const auto data = synth::gen_synthetic(scfg);
      const auto parts = synth::split_rows(data, std::vector<Index>(sizes.begin(), sizes.end()));
      const char* names[] = {"train", "val", "test"};
      for (std::size_t i = 0; i < parts.size(); ++i) {
        write_embeddings(parts[i].z, dir / (std::string(names[i]) + ".emb"));
        write_attributes(parts[i].attributes, dir / (std::string(names[i]) + ".attr"));
      }
      write_embeddings(synth::class_prototypes(data, leak), dir / "prototypes.emb");
    }
    std::ostringstream b;
    for (Index j : synth_kind == "retrieval" ? rcfg.bias_dims : scfg.bias_dims) b << j << '\n';
    write_text(dir / "bias_dims.txt", b.str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    // Callbacks run inside parse; toolkit errors are rethrown below with
    // their own class, so anything here is a command-line problem.
    std::cerr << "error: ConfigError: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
