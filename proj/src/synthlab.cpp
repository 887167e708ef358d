#include "sfid/synthlab.hpp"

#include "sfid/errors.hpp"
#include "sfid/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sfid::synth {

namespace {

void check_bias_dims(const std::vector<Index>& dims, Index dim) {
  if (dims.empty()) throw ConfigError("bias dimension set B must be non-empty");
  std::vector<Index> sorted = dims;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("bias dimensions must be distinct");
  if (sorted.front() < 0 || sorted.back() >= dim) throw ConfigError("bias dimension out of range");
}

std::vector<Index> complement(const std::vector<Index>& b, Index dim) {
  std::vector<char> in(static_cast<std::size_t>(dim), 0);
  for (Index j : b) in[static_cast<std::size_t>(j)] = 1;
  std::vector<Index> out;
  for (Index j = 0; j < dim; ++j)
    if (!in[static_cast<std::size_t>(j)]) out.push_back(j);
  return out;
}

// `count` orthonormal rows of width `width`.
MatrixD orthonormal_rows(Index count, Index width, Rng& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(width, count);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(width, count);
  return q.transpose();
}

}  // namespace

void SynthConfig::validate() const {
  if (n_samples < 1 || dim < 1) throw ConfigError("n_samples and dim must be >= 1");
  if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
  if (n_attributes < 2) throw ConfigError("n_attributes must be >= 2");
  check_bias_dims(bias_dims, dim);
  if (!(bias_strength >= 0) || !(class_strength >= 0) || !std::isfinite(bias_strength) ||
      !std::isfinite(class_strength))
    throw ConfigError("bias and class strengths must be finite and >= 0");
  if (!(noise_std > 0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be > 0");
  if (!(stereotype_coupling >= 0 && stereotype_coupling <= 1))
    throw ConfigError("stereotype coupling must lie in [0, 1]");
  if (dim - static_cast<Index>(bias_dims.size()) < n_classes)
    throw ConfigError("dim too small to host " + std::to_string(n_classes) +
                      " orthogonal class directions outside the bias dimensions");
  if (geometry == BiasGeometry::Rotated) {
    if (n_attributes != 2) throw ConfigError("rotated bias geometry supports two attributes");
    if (bias_dims.size() % 2 != 0) throw ConfigError("rotated bias geometry needs an even |B|");
  } else if (static_cast<Index>(bias_dims.size()) < n_attributes - 1) {
    throw ConfigError("|B| too small to separate the attributes");
  }
}

std::vector<Index> pick_bias_dims(Index dim, Index count, std::uint64_t seed) {
  if (count < 1 || count > dim) throw ConfigError("bias dimension count out of range");
  std::vector<Index> all(static_cast<std::size_t>(dim));
  std::iota(all.begin(), all.end(), Index{0});
  Rng rng = make_rng(seed, "synth.bias_dims");
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(count));
  std::sort(all.begin(), all.end());
  return all;
}

SynthData gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SynthData out;
  out.bias_dims = cfg.bias_dims;
  std::sort(out.bias_dims.begin(), out.bias_dims.end());
  const auto& b = out.bias_dims;
  const auto nb = static_cast<Index>(b.size());
  const auto rest = complement(b, cfg.dim);
  const int a_count = cfg.n_attributes;

  Rng geo = make_rng(cfg.seed, "synth.geometry");
  out.class_directions = MatrixD::Zero(cfg.n_classes, cfg.dim);
  const MatrixD basis = orthonormal_rows(cfg.n_classes, static_cast<Index>(rest.size()), geo);
  for (int c = 0; c < cfg.n_classes; ++c)
    for (std::size_t j = 0; j < rest.size(); ++j) out.class_directions(c, rest[j]) = basis(c, static_cast<Index>(j));

  // Axis: centered Gaussian patterns on B, so two attributes give +-u.
  // Rotated: w_0 = r and w_1 = r * h for random signs r and a balanced sign
  // vector h, both scaled to unit norm. The two are orthogonal and every
  // coordinate has magnitude 1/sqrt(|B|).
  std::normal_distribution<double> normal;
  MatrixD patterns(a_count, nb);
  if (cfg.geometry == BiasGeometry::Axis) {
    for (Index i = 0; i < patterns.size(); ++i) patterns.data()[i] = normal(geo);
    patterns.rowwise() -= patterns.colwise().mean();
    for (int a = 0; a < a_count; ++a) patterns.row(a).normalize();
  } else {
    std::vector<double> h(static_cast<std::size_t>(nb), 1.0);
    std::fill(h.begin() + nb / 2, h.end(), -1.0);
    std::shuffle(h.begin(), h.end(), geo);
    std::bernoulli_distribution sign(0.5);
    const double scale = 1.0 / std::sqrt(static_cast<double>(nb));
    for (Index j = 0; j < nb; ++j) {
      const double r = sign(geo) ? scale : -scale;
      patterns(0, j) = r;
      patterns(1, j) = r * h[static_cast<std::size_t>(j)];
    }
  }
  out.attribute_directions = MatrixD::Zero(a_count, cfg.dim);
  for (int a = 0; a < a_count; ++a)
    for (Index j = 0; j < nb; ++j) out.attribute_directions(a, b[static_cast<std::size_t>(j)]) = patterns(a, j);

  Rng rng = make_rng(cfg.seed, "synth.samples");
  std::uniform_int_distribution<int> pick_class(0, cfg.n_classes - 1);
  std::uniform_int_distribution<int> pick_attr(0, a_count - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  MatrixF z(cfg.n_samples, cfg.dim);
  out.attributes.labels.resize(static_cast<std::size_t>(cfg.n_samples));
  out.attributes.class_labels.emplace(static_cast<std::size_t>(cfg.n_samples));
  VectorD row(cfg.dim);
  for (Index i = 0; i < cfg.n_samples; ++i) {
    const int c = pick_class(rng);
    const int a = unit(rng) < cfg.stereotype_coupling ? c % a_count : pick_attr(rng);
    out.attributes.labels[static_cast<std::size_t>(i)] = a;
    (*out.attributes.class_labels)[static_cast<std::size_t>(i)] = c;

    for (Index j = 0; j < cfg.dim; ++j) row(j) = cfg.noise_std * normal(rng);
    row += cfg.class_strength * out.class_directions.row(c).transpose();
    // Rotated samples sit at a random sign along their attribute's direction.
    const double sign = cfg.geometry == BiasGeometry::Axis || coin(rng) ? 1.0 : -1.0;
    row += sign * cfg.bias_strength * out.attribute_directions.row(a).transpose();
    z.row(i) = row.cast<float>().transpose();
  }
  out.z = EmbeddingMatrix(std::move(z), "synth");
  out.attributes.attribute_column = "attribute";
  for (int a = 0; a < a_count; ++a) out.attributes.attribute_names.push_back("a" + std::to_string(a));
  return out;
}

std::vector<SynthData> split_rows(const SynthData& data, const std::vector<Index>& sizes) {
  Index total = 0;
  for (Index s : sizes) {
    if (s < 1) throw ConfigError("split sizes must be >= 1");
    total += s;
  }
  if (total > data.z.n_samples()) throw ConfigError("split sizes exceed the sample count");
  std::vector<SynthData> out;
  Index start = 0;
  for (Index s : sizes) {
    SynthData part;
    part.bias_dims = data.bias_dims;
    part.class_directions = data.class_directions;
    part.attribute_directions = data.attribute_directions;
    part.z = EmbeddingMatrix(data.z.data.middleRows(start, s), data.z.source_tag);
    part.attributes.attribute_names = data.attributes.attribute_names;
    part.attributes.attribute_column = data.attributes.attribute_column;
    const auto b = data.attributes.labels.begin() + start;
    part.attributes.labels.assign(b, b + s);
    if (data.attributes.class_labels) {
      const auto cb = data.attributes.class_labels->begin() + start;
      part.attributes.class_labels.emplace(cb, cb + s);
    }
    out.push_back(std::move(part));
    start += s;
  }
  return out;
}

EmbeddingMatrix class_prototypes(const SynthData& data, double leak) {
  const Index n_classes = data.class_directions.rows();
  const Index a_count = data.attribute_directions.rows();
  MatrixD p = data.class_directions;
  for (Index c = 0; c < n_classes; ++c) p.row(c) += leak * data.attribute_directions.row(c % a_count);
  return EmbeddingMatrix(p.cast<float>(), "prototypes");
}

double probe_accuracy(const EmbeddingMatrix& z, const AttributeTable& y, std::uint64_t seed,
                      int folds, ForestParams forest) {
  check_paired(z, y);
  if (folds < 2) throw ConfigError("probe needs at least two folds");
  const auto n = static_cast<Index>(y.size());
  if (n < folds) throw DataError("fewer samples than folds");
  {
    std::vector<int> sorted = y.labels;
    std::sort(sorted.begin(), sorted.end());
    if (std::unique(sorted.begin(), sorted.end()) - sorted.begin() < 2)
      throw DataError("probe needs at least two attribute values");
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng = make_rng(seed, "probe.folds");
  std::shuffle(order.begin(), order.end(), rng);

  Index correct = 0;
  for (int f = 0; f < folds; ++f) {
    const Index lo = n * f / folds, hi = n * (f + 1) / folds;
    const Index n_test = hi - lo;
    MatrixF train(n - n_test, z.n_features()), test(n_test, z.n_features());
    std::vector<int> train_y, test_y;
    Index tr = 0, te = 0;
    for (Index p = 0; p < n; ++p) {
      const Index i = order[static_cast<std::size_t>(p)];
      if (p >= lo && p < hi) {
        test.row(te++) = z.data.row(i);
        test_y.push_back(y.labels[static_cast<std::size_t>(i)]);
      } else {
        train.row(tr++) = z.data.row(i);
        train_y.push_back(y.labels[static_cast<std::size_t>(i)]);
      }
    }
    forest.seed = derive_seed(seed, "probe.forest", static_cast<std::uint64_t>(f));
    const ForestModel model = fit_forest(train, train_y, y.n_attributes(), forest);
    const auto pred = argmax_rows(predict_proba(model, test));
    for (Index i = 0; i < n_test; ++i)
      if (pred[static_cast<std::size_t>(i)] == test_y[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void RetrievalConfig::validate() const {
  if (n_images < 2 || n_images % 2 != 0) throw ConfigError("n_images must be even and >= 2");
  if (dim < 2) throw ConfigError("dim must be >= 2");
  check_bias_dims(bias_dims, dim);
  if (static_cast<Index>(bias_dims.size()) >= dim) throw ConfigError("B must leave content dimensions");
  for (double v : {bias_strength, content_strength, detail_strength, image_noise, attribute_noise, text_noise})
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("retrieval strengths must be finite and >= 0");
  if (n_debias_train < 2 || n_debias_val < 1) throw ConfigError("debias split sizes too small");
}

RetrievalScenario make_retrieval_scenario(const RetrievalConfig& cfg) {
  cfg.validate();
  RetrievalScenario out;
  out.bias_dims = cfg.bias_dims;
  std::sort(out.bias_dims.begin(), out.bias_dims.end());
  const auto rest = complement(out.bias_dims, cfg.dim);

  Rng geo = make_rng(cfg.seed, "retrieval.geometry");
  std::normal_distribution<double> normal;
  VectorD u = VectorD::Zero(cfg.dim);
  for (Index j : out.bias_dims) u(j) = normal(geo);
  u.normalize();

  auto content = [&](Rng& rng, double scale) {
    VectorD v = VectorD::Zero(cfg.dim);
    for (Index j : rest) v(j) = scale * normal(rng);
    return v;
  };
  auto noise = [&](Rng& rng, double scale) {
    VectorD v(cfg.dim);
    for (Index j = 0; j < cfg.dim; ++j) v(j) = scale * normal(rng);
    return v;
  };
  auto sign = [](int a) { return a == 1 ? 1.0 : -1.0; };
  auto ambiguity = [&](Rng& rng) {
    VectorD v = VectorD::Zero(cfg.dim);
    for (Index j : out.bias_dims) v(j) = cfg.attribute_noise * normal(rng);
    return v;
  };

  // Each scene is photographed once per attribute value; captions describe one
  // specific photo and carry a per-caption stereotype leak along u.
  Rng rng = make_rng(cfg.seed, "retrieval.samples");
  const Index n = cfg.n_images;
  std::vector<Index> slot(static_cast<std::size_t>(n));
  std::iota(slot.begin(), slot.end(), Index{0});
  std::shuffle(slot.begin(), slot.end(), rng);
  MatrixF images(n, cfg.dim), texts(n, cfg.dim);
  out.image_attributes.labels.assign(static_cast<std::size_t>(n), 0);
  out.truth.resize(static_cast<std::size_t>(n));
  std::bernoulli_distribution coin(0.5);
  for (Index p = 0; p < n / 2; ++p) {
    const VectorD scene = content(rng, cfg.content_strength);
    for (int a = 0; a < 2; ++a) {
      const Index idx = slot[static_cast<std::size_t>(2 * p + a)];
      const VectorD detail = content(rng, cfg.detail_strength);
      const VectorD img = scene + detail + cfg.bias_strength * sign(a) * u + ambiguity(rng) +
                          noise(rng, cfg.image_noise);
      const double leak = coin(rng) ? 1.0 : -1.0;
      const VectorD txt = scene + detail + cfg.bias_strength * leak * u + noise(rng, cfg.text_noise);
      images.row(idx) = img.cast<float>().transpose();
      texts.row(idx) = txt.cast<float>().transpose();
      out.image_attributes.labels[static_cast<std::size_t>(idx)] = a;
      out.truth[static_cast<std::size_t>(idx)] = idx;
    }
  }
  out.images = EmbeddingMatrix(std::move(images), "retrieval.images");
  out.texts = EmbeddingMatrix(std::move(texts), "retrieval.texts");
  out.image_attributes.attribute_names = {"a0", "a1"};

  auto debias_set = [&](Index count, const char* tag, EmbeddingMatrix& z, AttributeTable& y) {
    Rng r = make_rng(cfg.seed, tag);
    MatrixF m(count, cfg.dim);
    y = AttributeTable{};
    y.attribute_names = {"a0", "a1"};
    for (Index i = 0; i < count; ++i) {
      const int a = coin(r) ? 1 : 0;
      const VectorD img = content(r, cfg.content_strength) + content(r, cfg.detail_strength) +
                          cfg.bias_strength * sign(a) * u + ambiguity(r) + noise(r, cfg.image_noise);
      m.row(i) = img.cast<float>().transpose();
      y.labels.push_back(a);
    }
    z = EmbeddingMatrix(std::move(m), tag);
  };
  debias_set(cfg.n_debias_train, "retrieval.debias_train", out.debias_train, out.debias_train_attributes);
  debias_set(cfg.n_debias_val, "retrieval.debias_val", out.debias_val, out.debias_val_attributes);
  return out;
}

}  // namespace sfid::synth
