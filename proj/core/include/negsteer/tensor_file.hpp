#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace negsteer {

/// A named tensor decoded to 32-bit floats. Shape is row-major.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  int64_t numel() const;
  int64_t dim(std::size_t i) const { return shape.at(i); }
};

/// In-memory view of a safetensors container.
///
/// Layout on disk: 8-byte little-endian header length, a UTF-8 JSON header
/// mapping tensor name to {dtype, shape, data_offsets}, then the tensor bytes.
/// F32, F16 and BF16 are decoded on read; writes always emit F32 with tensors
/// in name order, so identical content yields identical bytes.
class TensorFile {
 public:
  static TensorFile read(const std::filesystem::path& path);
  static TensorFile parse(std::span<const std::byte> bytes);

  void write(const std::filesystem::path& path) const;
  std::vector<std::byte> serialize() const;

  void add(std::string name, std::vector<int64_t> shape, std::vector<float> data);

  bool contains(std::string_view name) const;
  /// Throws LoadError("<name> absent") when missing.
  const Tensor& at(std::string_view name) const;

  const std::map<std::string, Tensor, std::less<>>& tensors() const { return tensors_; }
  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  /// SHA-256 of the raw bytes this file was parsed from (empty if built in memory).
  const std::string& source_sha256() const { return source_sha256_; }

 private:
  std::map<std::string, Tensor, std::less<>> tensors_;
  std::map<std::string, std::string> metadata_;
  std::string source_sha256_;
};

/// SHA-256 of a tensor's little-endian F32 bytes.
std::string tensor_sha256(const Tensor& t);

}  // namespace negsteer
