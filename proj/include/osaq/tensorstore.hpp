#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "osaq/linalg.hpp"

namespace osaq {

enum class Dtype : std::uint8_t { F32, F64, I32, U8 };

std::size_t dtype_size(Dtype dt);
const char* dtype_tag(Dtype dt);
/// Throws UnknownDtype for unrecognized tags.
Dtype dtype_from_tag(const std::string& tag);

/// A named-archive payload: dtype, shape and little-endian raw bytes.
struct Tensor {
  Dtype dtype = Dtype::F32;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t element_count() const;

  static Tensor from_matrix(const Matrix& m, Dtype dt = Dtype::F32);
  static Tensor from_doubles(std::span<const double> v, Dtype dt = Dtype::F32);
  static Tensor from_i32(std::span<const std::int32_t> v);
  static Tensor from_u8(std::span<const std::uint8_t> v, std::vector<std::size_t> shape);

  /// 2-D f32/f64 tensors only; validates finiteness (external input).
  Matrix to_matrix() const;
  /// 1-D or flattened view of f32/f64 data, validated finite.
  std::vector<double> to_doubles() const;
  std::vector<std::int32_t> to_i32() const;
};

/// Parsed archive contents. Satisfies the format invariants: unique non-empty
/// names (≤ 256 bytes UTF-8), 8-byte aligned non-overlapping ascending
/// offsets, and byte lengths matching shape · dtype size.
class TensorArchive {
 public:
  explicit TensorArchive(std::map<std::string, Tensor> tensors) : tensors_(std::move(tensors)) {}

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  const Tensor& at(const std::string& name) const;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Collects named tensors and writes them deterministically: identical content
/// yields a byte-identical file. Writing is create-temp-then-rename.
class ArchiveWriter {
 public:
  /// Throws NameCollision on duplicate names, NonFinite for float payloads
  /// containing NaN/Inf, MalformedHeader for invalid names.
  void add(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  void write(const std::filesystem::path& path) const;

 private:
  std::map<std::string, Tensor> tensors_;
};

TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace osaq
