#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sfid {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = RowMatrix<float>;
using MatrixD = RowMatrix<double>;
using VectorD = Vector<double>;

// N x C frozen representations, row-major float32.
struct EmbeddingMatrix {
  MatrixF data;
  std::string source_tag;

  EmbeddingMatrix() = default;
  explicit EmbeddingMatrix(MatrixF m, std::string tag = {})
      : data(std::move(m)), source_tag(std::move(tag)) {}

  Index n_samples() const { return data.rows(); }
  Index n_features() const { return data.cols(); }

  // Throws DataError unless dims are >= 1 and every entry is finite.
  void validate() const;
};

// Per-sample sensitive attribute (dense ids into attribute_names) plus an
// optional downstream class label.
struct AttributeTable {
  std::vector<int> labels;
  std::vector<std::string> attribute_names;
  std::optional<std::vector<int>> class_labels;
  std::string attribute_column = "attribute";

  std::size_t size() const { return labels.size(); }
  int n_attributes() const { return static_cast<int>(attribute_names.size()); }
  int n_classes() const;

  // A >= 2, every label in range, class_labels (if any) same length.
  void validate() const;
  // Index of a named attribute value; DataError if unknown.
  int attribute_id(const std::string& name) const;
};

enum class TensorLayout { NSC, NCHW };

TensorLayout parse_layout(const std::string& s);
const char* layout_name(TensorLayout layout);

// Decoder-style outputs: N x S x C (text) or N x C x H x W (image), stored
// contiguously in row-major order.
struct EmbeddingTensor {
  TensorLayout layout = TensorLayout::NSC;
  std::vector<Index> dims;
  std::vector<float> data;

  EmbeddingTensor() = default;
  EmbeddingTensor(TensorLayout l, std::vector<Index> d);

  Index n_samples() const { return dims.at(0); }
  Index channels() const { return layout == TensorLayout::NSC ? dims.at(2) : dims.at(1); }
  // Product of the non-sample, non-channel axes.
  Index positions() const;

  float& at(Index n, Index pos, Index channel);
  float at(Index n, Index pos, Index channel) const;

  void validate() const;
};

EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path);

// Encodes into the EMB1 byte layout; write_embeddings is this plus a file write.
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& matrix);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes);

// Without `known_names`, attribute strings are mapped to ids in sorted order
// and at least two distinct values are required. With `known_names`, ids follow
// that list and any other string is a DataError.
AttributeTable read_attributes(const std::filesystem::path& path,
                               const std::vector<std::string>* known_names = nullptr);
AttributeTable parse_attributes(const std::string& text,
                                const std::vector<std::string>* known_names = nullptr);
void write_attributes(const AttributeTable& table, const std::filesystem::path& path);

// DataError when the row counts disagree.
void check_paired(const EmbeddingMatrix& z, const AttributeTable& y);

// Flattened tensors travel as EMB1 matrices with one row per sample.
EmbeddingTensor tensor_from_matrix(const EmbeddingMatrix& m, TensorLayout layout,
                                   std::span<const Index> inner_dims);
EmbeddingMatrix matrix_from_tensor(const EmbeddingTensor& t);

std::uint64_t hash_file(const std::filesystem::path& path);

}  // namespace sfid
