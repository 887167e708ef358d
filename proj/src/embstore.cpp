#include "sfid/embstore.hpp"

#include "sfid/errors.hpp"
#include "sfid/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace sfid {

static_assert(std::endian::native == std::endian::little,
              "EMB1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  if (data.rows() < 1 || data.cols() < 1) {
    throw DataError("embedding matrix must have at least one row and one column");
  }
  if (!data.allFinite()) {
    for (Index i = 0; i < data.rows(); ++i)
      for (Index j = 0; j < data.cols(); ++j)
        if (!std::isfinite(data(i, j)))
          throw DataError("non-finite entry at row " + std::to_string(i) + ", column " +
                          std::to_string(j));
  }
}

int AttributeTable::n_classes() const {
  if (!class_labels || class_labels->empty()) return 0;
  return *std::max_element(class_labels->begin(), class_labels->end()) + 1;
}

void AttributeTable::validate() const {
  if (labels.empty()) throw DataError("attribute table is empty");
  if (attribute_names.size() < 2)
    throw DataError("attribute table needs at least two attribute values");
  for (int v : labels)
    if (v < 0 || v >= n_attributes())
      throw DataError("attribute id " + std::to_string(v) + " out of range");
  if (class_labels) {
    if (class_labels->size() != labels.size())
      throw DataError("class label column length differs from attribute column");
    for (int c : *class_labels)
      if (c < 0) throw DataError("negative class label");
  }
}

int AttributeTable::attribute_id(const std::string& name) const {
  auto it = std::find(attribute_names.begin(), attribute_names.end(), name);
  if (it == attribute_names.end()) throw DataError("unknown attribute value '" + name + "'");
  return static_cast<int>(it - attribute_names.begin());
}

TensorLayout parse_layout(const std::string& s) {
  std::string lower;
  std::transform(s.begin(), s.end(), std::back_inserter(lower),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "nsc") return TensorLayout::NSC;
  if (lower == "nchw") return TensorLayout::NCHW;
  throw ConfigError("unknown tensor layout '" + s + "' (expected nsc or nchw)");
}

const char* layout_name(TensorLayout layout) {
  return layout == TensorLayout::NSC ? "nsc" : "nchw";
}

EmbeddingTensor::EmbeddingTensor(TensorLayout l, std::vector<Index> d)
    : layout(l), dims(std::move(d)) {
  validate();
  Index total = 1;
  for (Index x : dims) total *= x;
  data.assign(static_cast<std::size_t>(total), 0.0f);
}

Index EmbeddingTensor::positions() const {
  return layout == TensorLayout::NSC ? dims.at(1) : dims.at(2) * dims.at(3);
}

// NSC: offset = (n*S + s)*C + c. NCHW: offset = (n*C + c)*HW + hw.
float& EmbeddingTensor::at(Index n, Index pos, Index channel) {
  const Index c = channels(), p = positions();
  auto off = layout == TensorLayout::NSC ? (n * p + pos) * c + channel : (n * c + channel) * p + pos;
  return data[static_cast<std::size_t>(off)];
}

float EmbeddingTensor::at(Index n, Index pos, Index channel) const {
  return const_cast<EmbeddingTensor*>(this)->at(n, pos, channel);
}

void EmbeddingTensor::validate() const {
  const std::size_t rank = layout == TensorLayout::NSC ? 3 : 4;
  if (dims.size() != rank)
    throw ConfigError(std::string("layout ") + layout_name(layout) + " needs " +
                      std::to_string(rank) + " axes");
  for (Index x : dims)
    if (x < 1) throw DataError("tensor axes must be >= 1");
  if (!data.empty()) {
    Index total = 1;
    for (Index x : dims) total *= x;
    if (static_cast<Index>(data.size()) != total) throw DataError("tensor payload size mismatch");
    for (float v : data)
      if (!std::isfinite(v)) throw DataError("non-finite tensor entry");
  }
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& matrix) {
  matrix.validate();
  if (matrix.n_samples() > 0xffffffffLL || matrix.n_features() > 0xffffffffLL)
    throw DataError("matrix dims exceed the 32-bit header fields");
  std::vector<std::uint8_t> out;
  const auto payload = static_cast<std::size_t>(matrix.data.size()) * sizeof(float);
  out.reserve(kHeaderBytes + payload);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(matrix.n_samples()));
  put_u32(out, static_cast<std::uint32_t>(matrix.n_features()));
  put_u32(out, 0);
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(matrix.data.data());
  out.insert(out.end(), bytes, bytes + payload);
  return out;
}

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("file shorter than the 16-byte EMB1 header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic (expected EMB1)");
  const std::uint32_t rows = get_u32(bytes.data() + 4);
  const std::uint32_t cols = get_u32(bytes.data() + 8);
  if (get_u32(bytes.data() + 12) != 0) throw FormatError("reserved header field is not zero");
  if (rows == 0 || cols == 0) throw FormatError("header declares an empty matrix");
  const std::size_t expected = std::size_t(rows) * cols * sizeof(float);
  const std::size_t actual = bytes.size() - kHeaderBytes;
  if (actual < expected)
    throw FormatError("truncated payload: header declares " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual));
  if (actual > expected)
    throw FormatError("payload has " + std::to_string(actual - expected) +
                      " trailing bytes beyond the declared dims");
  EmbeddingMatrix m(MatrixF(rows, cols));
  std::memcpy(m.data.data(), bytes.data() + kHeaderBytes, expected);
  m.validate();
  return m;
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    auto m = decode_embeddings(bytes);
    m.source_tag = path.filename().string();
    return m;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& path) {
  const auto bytes = encode_embeddings(matrix);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

AttributeTable parse_attributes(const std::string& text, const std::vector<std::string>* known_names) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_tabs(line);
    if (header.empty()) {
      if (fields.size() != 2 && fields.size() != 3)
        throw DataError("attribute header must have 2 or 3 tab-separated columns");
      header = std::move(fields);
      continue;
    }
    if (fields.size() != header.size())
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " columns, found " +
                      std::to_string(fields.size()));
    if (fields[1].empty()) throw DataError("line " + std::to_string(line_no) + ": empty attribute");
    rows.push_back(std::move(fields));
  }
  if (header.empty()) throw DataError("attribute file is empty");
  if (rows.empty()) throw DataError("attribute file has a header but no rows");

  AttributeTable table;
  table.attribute_column = header[1];
  if (known_names) {
    table.attribute_names = *known_names;
  } else {
    std::vector<std::string> names;
    for (const auto& r : rows) names.push_back(r[1]);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    table.attribute_names = std::move(names);
  }
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < table.attribute_names.size(); ++i)
    ids[table.attribute_names[i]] = static_cast<int>(i);

  table.labels.reserve(rows.size());
  if (header.size() == 3) table.class_labels.emplace();
  for (const auto& r : rows) {
    auto it = ids.find(r[1]);
    if (it == ids.end()) throw DataError("unknown attribute value '" + r[1] + "'");
    table.labels.push_back(it->second);
    if (header.size() == 3) {
      int c = 0;
      std::size_t used = 0;
      try {
        c = std::stoi(r[2], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != r[2].size() || c < 0)
        throw DataError("class label '" + r[2] + "' is not a non-negative integer");
      table.class_labels->push_back(c);
    }
  }
  if (table.attribute_names.size() < 2) throw DataError("attribute column has a single value");
  return table;
}

AttributeTable read_attributes(const std::filesystem::path& path,
                               const std::vector<std::string>* known_names) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open attribute file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_attributes(ss.str(), known_names);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_attributes(const AttributeTable& table, const std::filesystem::path& path) {
  table.validate();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "sample_id\t" << table.attribute_column;
  if (table.class_labels) out << "\tclass";
  out << '\n';
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << i << '\t' << table.attribute_names[static_cast<std::size_t>(table.labels[i])];
    if (table.class_labels) out << '\t' << (*table.class_labels)[i];
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void check_paired(const EmbeddingMatrix& z, const AttributeTable& y) {
  if (static_cast<std::size_t>(z.n_samples()) != y.size())
    throw DataError("embedding rows (" + std::to_string(z.n_samples()) +
                    ") do not match attribute rows (" + std::to_string(y.size()) + ")");
}

EmbeddingTensor tensor_from_matrix(const EmbeddingMatrix& m, TensorLayout layout,
                                   std::span<const Index> inner_dims) {
  std::vector<Index> dims{m.n_samples()};
  dims.insert(dims.end(), inner_dims.begin(), inner_dims.end());
  EmbeddingTensor t(layout, dims);
  if (static_cast<Index>(t.data.size()) != m.data.size())
    throw DataError("tensor shape does not match the flattened row width " +
                    std::to_string(m.n_features()));
  std::copy(m.data.data(), m.data.data() + m.data.size(), t.data.begin());
  return t;
}

EmbeddingMatrix matrix_from_tensor(const EmbeddingTensor& t) {
  const Index n = t.n_samples();
  const Index width = static_cast<Index>(t.data.size()) / n;
  EmbeddingMatrix m(MatrixF(n, width));
  std::copy(t.data.begin(), t.data.end(), m.data.data());
  return m;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace sfid
