#pragma once

// Little-endian binary primitives shared by every artifact file
// (model checkpoints, steering/calibration vectors, adversarial images).

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "astra/types.hpp"

namespace astra::io {

enum class FormatErrorKind { bad_magic, version_mismatch, truncated, malformed, io };

std::string_view to_string(FormatErrorKind kind);

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& detail);
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

using Magic = std::array<char, 4>;

class ByteWriter {
 public:
  void magic(const Magic& m);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(std::string_view s);
  /// Length-prefixed (u32) blob.
  void blob(std::string_view s);
  /// Rank, dims, then values. Vectors are rank 1, matrices rank 2.
  void tensor(std::span<const std::uint32_t> dims, std::span<const double> values);
  void matrix(const Matrix& m);
  void vector(const Vector& v);

  const std::vector<std::uint8_t>& data() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  void expect_magic(const Magic& m);
  /// Reads a version word and rejects anything other than `expected`.
  void expect_version(std::uint32_t expected);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string blob();
  /// Reads a tensor header and checks it against the expected dims.
  std::vector<double> tensor(std::span<const std::uint32_t> expected_dims);
  /// Reads a tensor of any shape; dims are returned through `dims`.
  std::vector<double> tensor_any(std::vector<std::uint32_t>& dims);
  Matrix matrix();
  Vector vector();

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const;
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

}  // namespace astra::io
