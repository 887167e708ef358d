#pragma once

#include "sfid/embstore.hpp"

#include <filesystem>
#include <vector>

namespace sfid {

// Row-normalized copy in double precision; DataError on a zero-norm row.
MatrixD normalize_rows(const MatrixF& m, const char* what);

// Argmax of cosine similarity against each class prototype; ties to the lower class.
std::vector<int> zero_shot_classify(const EmbeddingMatrix& images, const EmbeddingMatrix& prototypes);

// Top-M images by cosine similarity, descending, ties to the lower index.
std::vector<Index> retrieve(const Eigen::Ref<const Eigen::RowVectorXf>& query,
                            const EmbeddingMatrix& images, Index m);

struct RankedList {
  std::vector<Index> images;
  std::vector<double> scores;
};

// One ranked list per query row.
std::vector<RankedList> retrieve_all(const EmbeddingMatrix& queries, const EmbeddingMatrix& images,
                                     Index m);

// prompt_id<TAB>rank<TAB>image_id<TAB>score, rank starting at 1.
void write_rankings(const std::vector<RankedList>& rankings, const std::filesystem::path& path);

}  // namespace sfid
