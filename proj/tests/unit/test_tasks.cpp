#include "helpers.hpp"

#include "sfid/errors.hpp"
#include "sfid/imputation.hpp"
#include "sfid/tasks.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>

using namespace sfid;

TEST_CASE("an image equal to a prototype is classified as that class") {
  const EmbeddingMatrix protos(sfid::test::random_matrix(4, 8, 1));
  const EmbeddingMatrix img(MatrixF(protos.data.row(2)));
  CHECK(zero_shot_classify(img, protos) == std::vector<int>{2});
}

TEST_CASE("cosine argmax favors the dominant orthogonal prototype") {
  MatrixF p = MatrixF::Zero(2, 3);
  p(0, 0) = 1;
  p(1, 1) = 1;
  MatrixF img(1, 3);
  img << 1, 0.1f, 0;
  CHECK(zero_shot_classify(EmbeddingMatrix(img), EmbeddingMatrix(p)) == std::vector<int>{0});
}

TEST_CASE("positive rescaling leaves predictions unchanged") {
  const EmbeddingMatrix protos(sfid::test::random_matrix(5, 16, 2));
  MatrixF imgs = sfid::test::random_matrix(100, 16, 3);
  const auto before = zero_shot_classify(EmbeddingMatrix(imgs), protos);
  imgs.row(7) *= 5.0f;
  imgs.row(42) *= 0.2f;
  MatrixF scaled_protos = protos.data;
  scaled_protos.row(1) *= 5.0f;
  CHECK(zero_shot_classify(EmbeddingMatrix(imgs), EmbeddingMatrix(scaled_protos)) == before);
}

TEST_CASE("zero-norm rows are DataErrors") {
  const EmbeddingMatrix protos(sfid::test::random_matrix(2, 3, 4));
  CHECK_THROWS_AS(zero_shot_classify(EmbeddingMatrix(MatrixF::Zero(1, 3)), protos), DataError);
  const Eigen::RowVectorXf q = Eigen::RowVectorXf::Zero(3);
  CHECK_THROWS_AS(retrieve(q, protos, 1), DataError);
}

TEST_CASE("retrieval matches an exhaustive sort") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const EmbeddingMatrix images(sfid::test::random_matrix(50, 16, seed));
    const Eigen::RowVectorXf q = sfid::test::random_matrix(1, 16, seed + 100).row(0);
    const auto full = retrieve(q, images, 50);
    std::vector<double> sim(50);
    const Eigen::RowVectorXd qd = q.cast<double>().normalized();
    for (Index i = 0; i < 50; ++i) sim[static_cast<std::size_t>(i)] = qd.dot(images.data.row(i).cast<double>().normalized());
    std::vector<Index> order(50);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return sim[static_cast<std::size_t>(a)] > sim[static_cast<std::size_t>(b)]; });
    CHECK(full == order);
    for (Index m : {1, 5, 17}) {
      const auto part = retrieve(q, images, m);
      CHECK(std::equal(part.begin(), part.end(), full.begin()));
    }
  }
}

TEST_CASE("a query equal to image 7 ranks it first") {
  const EmbeddingMatrix images(sfid::test::random_matrix(20, 8, 9));
  const Eigen::RowVectorXf q = images.data.row(7);
  CHECK(retrieve(q, images, 3).front() == 7);
  auto all = retrieve(q, images, 20);
  std::sort(all.begin(), all.end());
  std::vector<Index> perm(20);
  std::iota(perm.begin(), perm.end(), Index{0});
  CHECK(all == perm);
}

TEST_CASE("ties rank the lower index first") {
  MatrixF images(3, 2);
  images << 1, 0, 0, 1, 1, 0;
  const Eigen::RowVectorXf q = Eigen::RowVectorXf::Unit(2, 0);
  CHECK(retrieve(q, EmbeddingMatrix(images), 3) == std::vector<Index>{0, 2, 1});
  CHECK_THROWS(retrieve(q, EmbeddingMatrix(images), 4));
}

TEST_CASE("a k = 0 model changes no prediction") {
  const EmbeddingMatrix protos(sfid::test::random_matrix(3, 6, 10));
  const EmbeddingMatrix imgs(sfid::test::random_matrix(30, 6, 11));
  DebiasModel id;
  id.source_dim = 6;
  id.k = 0;
  CHECK(zero_shot_classify(apply_debias(id, imgs), apply_debias(id, protos)) == zero_shot_classify(imgs, protos));
  const auto a = retrieve_all(protos, imgs, 10);
  const auto b = retrieve_all(apply_debias(id, protos), apply_debias(id, imgs), 10);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].images == b[i].images);
}

TEST_CASE("rankings file lists prompt, rank, image and score") {
  sfid::test::TempDir dir;
  const EmbeddingMatrix imgs(sfid::test::random_matrix(5, 4, 12));
  const auto lists = retrieve_all(EmbeddingMatrix(MatrixF(imgs.data.topRows(2))), imgs, 2);
  write_rankings(lists, dir / "r.tsv");
  std::ifstream in(dir / "r.tsv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "prompt_id\trank\timage_id\tscore");
  CHECK(first.rfind("0\t1\t0\t", 0) == 0);
}
