#include "sfid/imputation.hpp"

#include "sfid/errors.hpp"
#include "sfid/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace sfid {

using json = nlohmann::ordered_json;

const char* mode_name(ImputeMode mode) {
  switch (mode) {
    case ImputeMode::LC: return "LC";
    case ImputeMode::HC: return "HC";
    case ImputeMode::ZERO: return "ZERO";
    case ImputeMode::GAUSS: return "GAUSS";
    case ImputeMode::DROP: return "DROP";
  }
  return "?";
}

ImputeMode parse_mode(const std::string& s) {
  std::string u;
  for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (u == "LC" || u == "LCI") return ImputeMode::LC;
  if (u == "HC") return ImputeMode::HC;
  if (u == "ZERO") return ImputeMode::ZERO;
  if (u == "GAUSS" || u == "GAUSSIAN") return ImputeMode::GAUSS;
  if (u == "DROP") return ImputeMode::DROP;
  throw ConfigError("unknown imputation mode '" + s + "'");
}

void DebiasModel::validate() const {
  if (source_dim < 1) throw DataError("debias model has no source dimension");
  if (k < 0 || k >= source_dim) throw ConfigError("k must satisfy 0 <= k < source_dim");
  if (static_cast<Index>(indices.size()) != k || values.size() != indices.size())
    throw DataError("debias model index/value lengths disagree with k");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= source_dim) throw DataError("selected index out of range");
    if (i > 0 && indices[i] <= indices[i - 1])
      throw DataError("selected indices must be strictly increasing");
    if (!std::isfinite(values[i])) throw DataError("non-finite imputation value");
  }
}

std::vector<Index> top_k_indices(const VectorD& scores, Index k) {
  if (k < 0 || k > scores.size()) throw ConfigError("k out of range for top-k selection");
  std::vector<Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
    return scores(a) > scores(b) || (scores(a) == scores(b) && a < b);
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<Index> low_confidence_set(const VectorD& confidence, double tau) {
  std::vector<Index> out;
  for (Index i = 0; i < confidence.size(); ++i)
    if (confidence(i) <= tau) out.push_back(i);
  return out;
}

std::vector<Index> high_confidence_set(const VectorD& confidence, std::span<const int> prediction,
                                       int target, double tau) {
  std::vector<Index> out;
  for (Index i = 0; i < confidence.size(); ++i)
    if (prediction[static_cast<std::size_t>(i)] == target && confidence(i) >= tau) out.push_back(i);
  return out;
}

namespace {

std::vector<Index> lowest_quantile(const VectorD& confidence, double q) {
  const auto n = static_cast<std::size_t>(confidence.size());
  const auto take = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(q * static_cast<double>(n))), 1, n);
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return confidence(a) < confidence(b); });
  order.resize(take);
  std::sort(order.begin(), order.end());
  return order;
}

void check_sfid_params(const SfidParams& params, Index c, int n_attributes) {
  if (params.k < 0 || params.k >= c)
    throw ConfigError("k=" + std::to_string(params.k) + " must be below the embedding width " +
                      std::to_string(c));
  const double chance = 1.0 / n_attributes;
  if (params.mode == ImputeMode::LC && !(params.tau > chance && params.tau <= 1.0))
    throw ConfigError("tau must lie in (1/A, 1]");
  if (params.mode == ImputeMode::HC) {
    if (!(params.hc_tau > chance && params.hc_tau <= 1.0))
      throw ConfigError("high-confidence threshold must lie in (1/A, 1]");
    if (params.target_attribute < 0 || params.target_attribute >= n_attributes)
      throw ConfigError("HC mode needs a valid target attribute");
  }
  if (params.fallback_quantile && !(*params.fallback_quantile > 0.0 && *params.fallback_quantile <= 1.0))
    throw ConfigError("fallback quantile must lie in (0, 1]");
}

}  // namespace

SfidFit fit_sfid_detailed(const EmbeddingMatrix& z_train, const AttributeTable& y_train,
                          const EmbeddingMatrix& z_val, const SfidParams& params) {
  check_paired(z_train, y_train);
  y_train.validate();
  z_train.validate();
  if (z_val.n_features() != z_train.n_features())
    throw DataError("training and validation embeddings differ in width");
  check_sfid_params(params, z_train.n_features(), y_train.n_attributes());
  SfidParams p = params;
  if (p.dataset_tag.empty()) p.dataset_tag = z_train.source_tag;
  return fit_sfid_with_forest(fit_forest(z_train, y_train, params.forest), y_train.attribute_names, z_val, p);
}

SfidFit fit_sfid_with_forest(ForestModel forest, const std::vector<std::string>& attribute_names,
                             const EmbeddingMatrix& z_val, const SfidParams& params) {
  forest.validate();
  z_val.validate();
  if (static_cast<std::size_t>(forest.n_classes) != attribute_names.size())
    throw DataError("forest class count does not match the attribute names");
  const Index c = forest.n_features;
  if (z_val.n_features() != c)
    throw DataError("validation embeddings do not match the forest width");
  check_sfid_params(params, c, static_cast<int>(attribute_names.size()));

  SfidFit fit;
  fit.forest = std::move(forest);
  const MatrixD proba = predict_proba(fit.forest, z_val);
  fit.val_confidence = confidence(proba);
  fit.val_prediction = argmax_rows(proba);

  auto& m = fit.model;
  m.mode = params.mode;
  m.k = params.k;
  m.source_dim = c;
  m.indices = top_k_indices(fit.forest.importances, params.k);
  m.values.assign(m.indices.size(), 0.0);
  m.tau = params.mode == ImputeMode::HC ? params.hc_tau : params.tau;
  m.noise_seed = derive_seed(params.forest.seed, "sfid.gauss");

  bool used_fallback = false;
  if (params.mode == ImputeMode::LC) {
    fit.confidence_set = low_confidence_set(fit.val_confidence, params.tau);
    if (fit.confidence_set.empty()) {
      const double min_conf = fit.val_confidence.minCoeff();
      if (!params.fallback_quantile) {
        std::ostringstream msg;
        msg << "no validation sample has confidence <= tau=" << params.tau
            << " (minimum observed confidence " << min_conf
            << "); raise tau or enable a fallback quantile";
        throw EmptyConfidenceSet(msg.str());
      }
      fit.confidence_set = lowest_quantile(fit.val_confidence, *params.fallback_quantile);
      used_fallback = true;
    }
  } else if (params.mode == ImputeMode::HC) {
    fit.confidence_set = high_confidence_set(fit.val_confidence, fit.val_prediction,
                                             params.target_attribute, params.hc_tau);
    if (fit.confidence_set.empty()) {
      std::ostringstream msg;
      msg << "no validation sample is predicted as '"
          << attribute_names[static_cast<std::size_t>(params.target_attribute)]
          << "' with confidence >= " << params.hc_tau;
      throw EmptyConfidenceSet(msg.str());
    }
  }
  if (params.mode == ImputeMode::LC || params.mode == ImputeMode::HC) {
    for (std::size_t j = 0; j < m.indices.size(); ++j) {
      double sum = 0.0;
      for (Index i : fit.confidence_set) sum += z_val.data(i, m.indices[j]);
      m.values[j] = sum / static_cast<double>(fit.confidence_set.size());
    }
  }

  m.provenance = json::object();
  m.provenance["method"] = "sfid";
  m.provenance["forest_seed"] = params.forest.seed;
  m.provenance["n_trees"] = fit.forest.trees.size();
  m.provenance["dataset"] = params.dataset_tag;
  m.provenance["attribute_names"] = attribute_names;
  if (params.mode == ImputeMode::HC)
    m.provenance["target_attribute"] =
        attribute_names[static_cast<std::size_t>(params.target_attribute)];
  if (params.mode == ImputeMode::LC || params.mode == ImputeMode::HC)
    m.provenance["confidence_set_size"] = fit.confidence_set.size();
  if (used_fallback) m.provenance["fallback_quantile"] = *params.fallback_quantile;
  m.provenance["oob_accuracy"] = fit.forest.oob_accuracy;
  m.validate();
  return fit;
}

DebiasModel fit_sfid(const EmbeddingMatrix& z_train, const AttributeTable& y_train,
                     const EmbeddingMatrix& z_val, const SfidParams& params) {
  return fit_sfid_detailed(z_train, y_train, z_val, params).model;
}

EmbeddingMatrix apply_debias(const DebiasModel& model, const EmbeddingMatrix& z,
                             std::optional<std::uint64_t> noise_seed) {
  model.validate();
  if (z.n_features() != model.source_dim)
    throw DataError("model expects width " + std::to_string(model.source_dim) + ", got " +
                    std::to_string(z.n_features()));
  if (model.mode == ImputeMode::DROP) {
    MatrixF out(z.n_samples(), model.output_dim());
    Index dst = 0;
    std::size_t next = 0;
    for (Index j = 0; j < z.n_features(); ++j) {
      if (next < model.indices.size() && model.indices[next] == j) {
        ++next;
        continue;
      }
      out.col(dst++) = z.data.col(j);
    }
    return EmbeddingMatrix(std::move(out), z.source_tag);
  }
  EmbeddingMatrix out = z;
  if (model.mode == ImputeMode::GAUSS) {
    Rng rng(noise_seed.value_or(model.noise_seed));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < out.n_samples(); ++i)
      for (Index j : model.indices) out.data(i, j) = static_cast<float>(normal(rng));
  } else {
    impute_columns(out.data, model.indices, model.values);
  }
  return out;
}

EmbeddingMatrix reduce_to_2d(const EmbeddingTensor& t) {
  t.validate();
  const Index n = t.n_samples(), c = t.channels(), p = t.positions();
  MatrixF out(n, c);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < c; ++j) {
      double sum = 0.0;
      for (Index pos = 0; pos < p; ++pos) sum += t.at(i, pos, j);
      out(i, j) = static_cast<float>(sum / static_cast<double>(p));
    }
  return EmbeddingMatrix(std::move(out));
}

EmbeddingTensor apply_debias_tensor(const DebiasModel& model, const EmbeddingTensor& t,
                                    std::optional<std::uint64_t> noise_seed) {
  model.validate();
  t.validate();
  if (model.mode == ImputeMode::DROP)
    throw ConfigError("DROP models change the channel count and cannot be applied to tensors");
  if (t.channels() != model.source_dim)
    throw DataError("tensor has " + std::to_string(t.channels()) + " channels, model expects " +
                    std::to_string(model.source_dim));
  EmbeddingTensor out = t;
  const Index n = t.n_samples(), p = t.positions();
  if (model.mode == ImputeMode::GAUSS) {
    Rng rng(noise_seed.value_or(model.noise_seed));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < n; ++i)
      for (Index pos = 0; pos < p; ++pos)
        for (Index j : model.indices) out.at(i, pos, j) = static_cast<float>(normal(rng));
    return out;
  }
  for (std::size_t s = 0; s < model.indices.size(); ++s) {
    const auto v = static_cast<float>(model.values[s]);
    for (Index i = 0; i < n; ++i)
      for (Index pos = 0; pos < p; ++pos) out.at(i, pos, model.indices[s]) = v;
  }
  return out;
}

std::string debias_model_to_json(const DebiasModel& model) {
  model.validate();
  json j;
  j["version"] = 1;
  j["mode"] = mode_name(model.mode);
  j["k"] = model.k;
  j["tau"] = model.tau;
  j["source_dim"] = model.source_dim;
  j["indices"] = model.indices;
  j["values"] = model.values;
  json prov = model.provenance;
  if (model.mode == ImputeMode::GAUSS) prov["noise_seed"] = model.noise_seed;
  j["provenance"] = prov;
  return j.dump(2) + "\n";
}

DebiasModel debias_model_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("debias model is not valid JSON: ") + e.what());
  }
  DebiasModel m;
  try {
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported debias model version");
    m.mode = parse_mode(j.at("mode").get<std::string>());
    m.k = j.at("k").get<Index>();
    m.tau = j.at("tau").get<double>();
    m.source_dim = j.at("source_dim").get<Index>();
    m.indices = j.at("indices").get<std::vector<Index>>();
    m.values = j.at("values").get<std::vector<double>>();
    m.provenance = j.value("provenance", json::object());
    if (m.provenance.contains("noise_seed")) {
      m.noise_seed = m.provenance["noise_seed"].get<std::uint64_t>();
      m.provenance.erase("noise_seed");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed debias model: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed debias model: ") + e.what());
  }
  m.validate();
  return m;
}

void save_debias_model(const DebiasModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << debias_model_to_json(model);
}

DebiasModel load_debias_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return debias_model_from_json(ss.str());
}

}  // namespace sfid
