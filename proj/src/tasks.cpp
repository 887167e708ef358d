#include "sfid/tasks.hpp"

#include "sfid/errors.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace sfid {

MatrixD normalize_rows(const MatrixF& m, const char* what) {
  MatrixD out = m.cast<double>();
  for (Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (!(norm > 0.0))
      throw DataError(std::string("zero-norm ") + what + " embedding at row " + std::to_string(i));
    out.row(i) /= norm;
  }
  return out;
}

std::vector<int> zero_shot_classify(const EmbeddingMatrix& images, const EmbeddingMatrix& prototypes) {
  if (images.n_features() != prototypes.n_features())
    throw DataError("image and prototype embeddings differ in width");
  const MatrixD scores = normalize_rows(images.data, "image") *
                         normalize_rows(prototypes.data, "prototype").transpose();
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Index i = 0; i < scores.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < scores.cols(); ++k)
      if (scores(i, k) > scores(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

namespace {

RankedList top_m(const Eigen::Ref<const VectorD>& scores, Index m) {
  std::vector<Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Index{0});
  auto better = [&](Index a, Index b) { return scores(a) > scores(b) || (scores(a) == scores(b) && a < b); };
  std::partial_sort(order.begin(), order.begin() + m, order.end(), better);
  order.resize(static_cast<std::size_t>(m));
  RankedList out;
  out.scores.reserve(order.size());
  for (Index i : order) out.scores.push_back(scores(i));
  out.images = std::move(order);
  return out;
}

void check_depth(Index m, Index n) {
  if (m < 1 || m > n)
    throw ConfigError("retrieval depth M=" + std::to_string(m) + " must lie in [1, " +
                      std::to_string(n) + "]");
}

}  // namespace

std::vector<Index> retrieve(const Eigen::Ref<const Eigen::RowVectorXf>& query,
                            const EmbeddingMatrix& images, Index m) {
  if (query.size() != images.n_features()) throw DataError("query and image widths differ");
  check_depth(m, images.n_samples());
  MatrixF q = query;
  const MatrixD qn = normalize_rows(q, "query");
  const VectorD scores = normalize_rows(images.data, "image") * qn.row(0).transpose();
  return top_m(scores, m).images;
}

std::vector<RankedList> retrieve_all(const EmbeddingMatrix& queries, const EmbeddingMatrix& images,
                                     Index m) {
  if (queries.n_features() != images.n_features()) throw DataError("query and image widths differ");
  check_depth(m, images.n_samples());
  const MatrixD in = normalize_rows(images.data, "image");
  const MatrixD qn = normalize_rows(queries.data, "query");
  const MatrixD scores = qn * in.transpose();
  std::vector<RankedList> out;
  out.reserve(static_cast<std::size_t>(qn.rows()));
  for (Index t = 0; t < qn.rows(); ++t) out.push_back(top_m(scores.row(t).transpose(), m));
  return out;
}

void write_rankings(const std::vector<RankedList>& rankings, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "prompt_id\trank\timage_id\tscore\n" << std::setprecision(9);
  for (std::size_t t = 0; t < rankings.size(); ++t)
    for (std::size_t r = 0; r < rankings[t].images.size(); ++r)
      out << t << '\t' << r + 1 << '\t' << rankings[t].images[r] << '\t' << rankings[t].scores[r] << '\n';
}

}  // namespace sfid
