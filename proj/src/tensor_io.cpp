#include "astra/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace astra::io {

std::string_view to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::bad_magic: return "bad magic";
    case FormatErrorKind::version_mismatch: return "version mismatch";
    case FormatErrorKind::truncated: return "truncation";
    case FormatErrorKind::malformed: return "malformed";
    case FormatErrorKind::io: return "io";
  }
  return "unknown";
}

FormatError::FormatError(FormatErrorKind kind, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

void ByteWriter::magic(const Magic& m) {
  for (char c : m) buf_.push_back(static_cast<std::uint8_t>(c));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

void ByteWriter::blob(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void ByteWriter::tensor(std::span<const std::uint32_t> dims, std::span<const double> values) {
  u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) u32(d);
  for (double v : values) f64(v);
}

void ByteWriter::matrix(const Matrix& m) {
  const std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(m.rows()),
                                          static_cast<std::uint32_t>(m.cols())};
  tensor(dims, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

void ByteWriter::vector(const Vector& v) {
  const std::array<std::uint32_t, 1> dims{static_cast<std::uint32_t>(v.size())};
  tensor(dims, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

void ByteWriter::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw FormatError(FormatErrorKind::io, "write failed for " + path.string());
}

ByteReader ByteReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return ByteReader(std::move(data));
}

void ByteReader::need(std::size_t n) const {
  if (buf_.size() - pos_ < n) {
    throw FormatError(FormatErrorKind::truncated,
                      "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", have " +
                          std::to_string(buf_.size() - pos_));
  }
}

void ByteReader::expect_magic(const Magic& m) {
  need(4);
  for (std::size_t i = 0; i < 4; ++i) {
    if (buf_[pos_ + i] != static_cast<std::uint8_t>(m[i])) {
      throw FormatError(FormatErrorKind::bad_magic, "expected " + std::string(m.begin(), m.end()));
    }
  }
  pos_ += 4;
}

void ByteReader::expect_version(std::uint32_t expected) {
  const auto v = u32();
  if (v != expected) {
    throw FormatError(FormatErrorKind::version_mismatch,
                      "file version " + std::to_string(v) + ", reader supports " + std::to_string(expected));
  }
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::blob() {
  const auto n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<double> ByteReader::tensor_any(std::vector<std::uint32_t>& dims) {
  const auto rank = u32();
  if (rank > 8) throw FormatError(FormatErrorKind::malformed, "tensor rank " + std::to_string(rank));
  dims.clear();
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims.push_back(u32());
    count *= dims.back();
    if (count > (std::size_t{1} << 32)) throw FormatError(FormatErrorKind::malformed, "tensor too large");
  }
  need(count * 8);
  std::vector<double> values(count);
  for (auto& v : values) v = f64();
  return values;
}

std::vector<double> ByteReader::tensor(std::span<const std::uint32_t> expected_dims) {
  std::vector<std::uint32_t> dims;
  auto values = tensor_any(dims);
  if (!std::equal(dims.begin(), dims.end(), expected_dims.begin(), expected_dims.end())) {
    throw FormatError(FormatErrorKind::malformed, "tensor shape does not match the declared configuration");
  }
  return values;
}

Matrix ByteReader::matrix() {
  std::vector<std::uint32_t> dims;
  auto values = tensor_any(dims);
  if (dims.size() != 2) throw FormatError(FormatErrorKind::malformed, "expected a rank-2 tensor");
  Matrix m(dims[0], dims[1]);
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

Vector ByteReader::vector() {
  std::vector<std::uint32_t> dims;
  auto values = tensor_any(dims);
  if (dims.size() != 1) throw FormatError(FormatErrorKind::malformed, "expected a rank-1 tensor");
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace astra::io
