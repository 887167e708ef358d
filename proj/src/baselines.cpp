#include "sfid/baselines.hpp"

#include "sfid/errors.hpp"
#include "sfid/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace sfid {

using json = nlohmann::ordered_json;

std::vector<int> equal_frequency_bins(std::span<const float> values, int bins) {
  const auto n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<int> out(n);
  std::size_t group_start = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (r > 0 && values[order[r]] != values[order[r - 1]]) group_start = r;
    out[order[r]] = static_cast<int>(group_start * static_cast<std::size_t>(bins) / n);
  }
  return out;
}

double plugin_mutual_information(std::span<const int> x, int nx, std::span<const int> y, int ny) {
  const auto n = static_cast<double>(x.size());
  std::vector<double> joint(static_cast<std::size_t>(nx * ny), 0.0), px(static_cast<std::size_t>(nx), 0.0),
      py(static_cast<std::size_t>(ny), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    joint[static_cast<std::size_t>(x[i] * ny + y[i])] += 1.0;
    px[static_cast<std::size_t>(x[i])] += 1.0;
    py[static_cast<std::size_t>(y[i])] += 1.0;
  }
  double mi = 0.0;
  for (int a = 0; a < nx; ++a)
    for (int b = 0; b < ny; ++b) {
      const double c = joint[static_cast<std::size_t>(a * ny + b)];
      if (c == 0.0) continue;
      mi += c / n * std::log(c * n / (px[static_cast<std::size_t>(a)] * py[static_cast<std::size_t>(b)]));
    }
  return std::max(0.0, mi);
}

VectorD mutual_info_features(const EmbeddingMatrix& z, const AttributeTable& y, int bins) {
  check_paired(z, y);
  if (bins < 2) throw ConfigError("MI estimation needs at least two bins");
  if (z.n_samples() < bins) throw DataError("MI estimation needs at least as many samples as bins");
  VectorD out(z.n_features());
  std::vector<float> column(static_cast<std::size_t>(z.n_samples()));
  for (Index j = 0; j < z.n_features(); ++j) {
    for (Index i = 0; i < z.n_samples(); ++i) column[static_cast<std::size_t>(i)] = z.data(i, j);
    const auto binned = equal_frequency_bins(column, bins);
    out(j) = plugin_mutual_information(binned, bins, y.labels, y.n_attributes());
  }
  return out;
}

DebiasModel fit_clipclip(const EmbeddingMatrix& z, const AttributeTable& y, Index k, ClipImpute impute,
                         int bins) {
  if (k < 0 || k >= z.n_features())
    throw ConfigError("k=" + std::to_string(k) + " must be below the embedding width " +
                      std::to_string(z.n_features()));
  const VectorD mi = mutual_info_features(z, y, bins);
  DebiasModel m;
  m.mode = impute == ClipImpute::ZERO ? ImputeMode::ZERO : ImputeMode::DROP;
  m.k = k;
  m.tau = 1.0;
  m.source_dim = z.n_features();
  m.indices = top_k_indices(mi, k);
  m.values.assign(m.indices.size(), 0.0);
  m.provenance["method"] = "clipclip";
  m.provenance["bins"] = bins;
  m.provenance["dataset"] = z.source_tag;
  m.provenance["attribute_names"] = y.attribute_names;
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------

void ResidualModel::validate() const {
  const Index c = residual_weights.rows();
  if (residual_weights.cols() != c || residual_bias.size() != c || classifier_weights.cols() != c ||
      classifier_bias.size() != classifier_weights.rows())
    throw DataError("residual model has inconsistent shapes");
  if (!residual_weights.allFinite() || !residual_bias.allFinite() || !classifier_weights.allFinite() ||
      !classifier_bias.allFinite())
    throw DataError("residual model has non-finite weights");
}

MatrixD classifier_proba(const MatrixD& z, const MatrixD& weights, const VectorD& bias) {
  MatrixD logits = z * weights.transpose();
  logits.rowwise() += bias.transpose();
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

DearLoss dear_objective(const MatrixD& z, std::span<const int> y, const MatrixD& classifier_weights,
                        const VectorD& classifier_bias, const MatrixD& residual_weights,
                        const VectorD& residual_bias, const DearLambdas& lambdas, MatrixD* grad_weights,
                        VectorD* grad_bias) {
  const Index n = z.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  MatrixD residual = z * residual_weights.transpose();
  residual.rowwise() += residual_bias.transpose();
  const MatrixD za = z + residual;
  const MatrixD p = classifier_proba(za, classifier_weights, classifier_bias);

  DearLoss loss;
  loss.reconstruction = residual.rowwise().squaredNorm().sum() * inv_n;
  MatrixD dlogits = MatrixD::Zero(n, p.cols());
  for (Index i = 0; i < n; ++i) {
    Index top = 0;
    const double m = p.row(i).maxCoeff(&top);
    const auto label = y[static_cast<std::size_t>(i)];
    loss.confidence += m;
    loss.cross_entropy -= std::log(std::max(p(i, label), 1e-300));
    // d max_softmax / d logits = m (e_top - p); d CE / d logits = p - e_y.
    dlogits.row(i) = -lambdas.confidence * m * p.row(i) - lambdas.adversarial * p.row(i);
    dlogits(i, top) += lambdas.confidence * m;
    dlogits(i, label) += lambdas.adversarial;
  }
  loss.confidence *= inv_n;
  loss.cross_entropy *= inv_n;
  loss.total = lambdas.reconstruction * loss.reconstruction + lambdas.confidence * loss.confidence -
               lambdas.adversarial * loss.cross_entropy;

  if (grad_weights || grad_bias) {
    const MatrixD dza = (dlogits * classifier_weights + 2.0 * lambdas.reconstruction * residual) * inv_n;
    if (grad_weights) *grad_weights = dza.transpose() * z;
    if (grad_bias) *grad_bias = dza.colwise().sum().transpose();
  }
  return loss;
}

namespace {

[[noreturn]] void diverged(const char* stage, int epoch) {
  throw TrainingError(std::string(stage) + " loss became non-finite; last finite epoch " +
                      std::to_string(epoch - 1));
}

}  // namespace

ResidualModel fit_dear(const EmbeddingMatrix& z, const AttributeTable& y, const DearLambdas& lambdas,
                       const DearTraining& training) {
  check_paired(z, y);
  y.validate();
  if (z.n_samples() < 2) throw DataError("DeAR needs at least two samples");
  {
    std::vector<int> present(static_cast<std::size_t>(y.n_attributes()), 0);
    for (int l : y.labels) present[static_cast<std::size_t>(l)] = 1;
    if (std::count(present.begin(), present.end(), 1) < 2)
      throw DataError("DeAR needs at least two attribute values present");
  }
  if (training.epochs < 1 || !(training.step_size > 0)) throw ConfigError("epochs and step size must be positive");

  const MatrixD x = z.data.cast<double>();
  const Index n = x.rows(), c = x.cols(), a = y.n_attributes();
  MatrixD onehot = MatrixD::Zero(n, a);
  for (Index i = 0; i < n; ++i) onehot(i, y.labels[static_cast<std::size_t>(i)]) = 1.0;

  ResidualModel model;
  model.lambdas = lambdas;
  model.seed = training.seed;
  Rng rng = make_rng(training.seed, "dear.init");
  std::normal_distribution<double> normal(0.0, 0.01);
  model.classifier_weights = MatrixD(a, c);
  for (Index i = 0; i < model.classifier_weights.size(); ++i) model.classifier_weights.data()[i] = normal(rng);
  model.classifier_bias = VectorD::Zero(a);

  // Step 1: attribute classifier by full-batch gradient descent on cross-entropy.
  for (int epoch = 0; epoch < training.epochs; ++epoch) {
    const MatrixD p = classifier_proba(x, model.classifier_weights, model.classifier_bias);
    double ce = 0;
    for (Index i = 0; i < n; ++i) ce -= std::log(std::max(p(i, y.labels[static_cast<std::size_t>(i)]), 1e-300));
    ce /= static_cast<double>(n);
    if (!std::isfinite(ce)) diverged("classifier", epoch);
    model.classifier_log.push_back(ce);
    const MatrixD d = (p - onehot) / static_cast<double>(n);
    model.classifier_weights -= training.step_size * (d.transpose() * x);
    model.classifier_bias -= training.step_size * d.colwise().sum().transpose();
  }

  // Step 2: freeze the classifier, fit the residual from zero.
  model.residual_weights = MatrixD::Zero(c, c);
  model.residual_bias = VectorD::Zero(c);
  MatrixD gw;
  VectorD gb;
  for (int epoch = 0; epoch <= training.epochs; ++epoch) {
    const bool last = epoch == training.epochs;
    const DearLoss loss = dear_objective(x, y.labels, model.classifier_weights, model.classifier_bias,
                                         model.residual_weights, model.residual_bias, lambdas,
                                         last ? nullptr : &gw, last ? nullptr : &gb);
    if (!std::isfinite(loss.total)) diverged("residual", epoch);
    if (!model.train_log.empty()) {
      const double prev = model.train_log.back();
      if (loss.total > prev + 1e-9 * std::max(1.0, std::abs(prev)))
        throw TrainingError("residual loss increased at epoch " + std::to_string(epoch) + " (" +
                            std::to_string(prev) + " -> " + std::to_string(loss.total) +
                            "); lower the step size");
    }
    model.train_log.push_back(loss.total);
    if (last) break;
    model.residual_weights -= training.step_size * gw;
    model.residual_bias -= training.step_size * gb;
  }
  model.validate();
  return model;
}

EmbeddingMatrix apply_dear(const ResidualModel& model, const EmbeddingMatrix& z) {
  if (z.n_features() != model.dim())
    throw DataError("residual model expects width " + std::to_string(model.dim()) + ", got " +
                    std::to_string(z.n_features()));
  const MatrixD x = z.data.cast<double>();
  MatrixD out = x + x * model.residual_weights.transpose();
  out.rowwise() += model.residual_bias.transpose();
  return EmbeddingMatrix(out.cast<float>(), z.source_tag);
}

namespace {

json matrix_json(const MatrixD& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

MatrixD matrix_from(const json& rows) {
  const auto n = static_cast<Index>(rows.size());
  const auto c = n > 0 ? static_cast<Index>(rows[0].size()) : 0;
  MatrixD m(n, c);
  for (Index i = 0; i < n; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)].get<std::vector<double>>();
    if (static_cast<Index>(r.size()) != c) throw FormatError("ragged weight matrix");
    for (Index j = 0; j < c; ++j) m(i, j) = r[static_cast<std::size_t>(j)];
  }
  return m;
}

VectorD vector_from(const json& v) {
  const auto r = v.get<std::vector<double>>();
  return Eigen::Map<const VectorD>(r.data(), static_cast<Index>(r.size()));
}

}  // namespace

std::string residual_model_to_json(const ResidualModel& model) {
  model.validate();
  json j;
  j["version"] = 1;
  j["mode"] = "DEAR";
  j["source_dim"] = model.dim();
  j["n_classes"] = model.n_classes();
  j["lambdas"] = {model.lambdas.reconstruction, model.lambdas.confidence, model.lambdas.adversarial};
  j["classifier"] = {{"weights", matrix_json(model.classifier_weights)},
                     {"bias", std::vector<double>(model.classifier_bias.data(),
                                                  model.classifier_bias.data() + model.classifier_bias.size())}};
  j["residual"] = {{"weights", matrix_json(model.residual_weights)},
                   {"bias", std::vector<double>(model.residual_bias.data(),
                                                model.residual_bias.data() + model.residual_bias.size())}};
  j["train_log"] = model.train_log;
  json prov = model.provenance;
  prov["method"] = "dear";
  prov["seed"] = model.seed;
  j["provenance"] = prov;
  return j.dump() + "\n";
}

ResidualModel residual_model_from_json(const std::string& text) {
  ResidualModel m;
  try {
    const json j = json::parse(text);
    if (j.at("mode").get<std::string>() != "DEAR") throw FormatError("not a residual model");
    const auto l = j.at("lambdas").get<std::vector<double>>();
    if (l.size() != 3) throw FormatError("expected three lambdas");
    m.lambdas = {l[0], l[1], l[2]};
    m.classifier_weights = matrix_from(j.at("classifier").at("weights"));
    m.classifier_bias = vector_from(j.at("classifier").at("bias"));
    m.residual_weights = matrix_from(j.at("residual").at("weights"));
    m.residual_bias = vector_from(j.at("residual").at("bias"));
    m.train_log = j.value("train_log", std::vector<double>{});
    m.provenance = j.at("provenance");
    m.seed = m.provenance.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed residual model: ") + e.what());
  }
  m.validate();
  return m;
}

void save_residual_model(const ResidualModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << residual_model_to_json(model);
}

ResidualModel load_residual_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return residual_model_from_json(ss.str());
}

}  // namespace sfid
