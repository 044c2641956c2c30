#include "negsteer/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "negsteer/errors.hpp"
#include "negsteer/hashing.hpp"

namespace negsteer {
namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

float half_to_float(uint16_t h) {
  const uint32_t sign = (h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1f;
  uint32_t mant = h & 0x3ffu;
  uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  throw LoadError("unsupported dtype " + dtype);
}

}  // namespace

int64_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

TensorFile TensorFile::read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("tensor container not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  return parse(bytes);
}

TensorFile TensorFile::parse(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) throw LoadError("tensor container truncated");
  uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) throw LoadError("tensor container header length out of range");
  const std::string_view header_text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw LoadError(std::string("tensor container header is not JSON: ") + e.what());
  }
  if (!header.is_object()) throw LoadError("tensor container header is not an object");

  TensorFile file;
  const auto data = bytes.subspan(8 + header_len);
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) file.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    try {
      const auto dtype = entry.at("dtype").get<std::string>();
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data.size())
        throw LoadError(name + ": data offsets out of range");
      const std::size_t esize = dtype_size(dtype);
      const auto n = static_cast<std::size_t>(t.numel());
      if (offsets[1] - offsets[0] != n * esize) throw LoadError(name + ": byte length does not match shape");
      const std::byte* src = data.data() + offsets[0];
      t.data.resize(n);
      if (dtype == "F32") {
        std::memcpy(t.data.data(), src, n * 4);
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          uint16_t v;
          std::memcpy(&v, src + 2 * i, 2);
          t.data[i] = dtype == "F16" ? half_to_float(v) : std::bit_cast<float>(uint32_t{v} << 16);
        }
      }
      file.tensors_.emplace(name, std::move(t));
    } catch (const json::exception& e) {
      throw LoadError(name + ": malformed header entry (" + e.what() + ")");
    }
  }
  file.source_sha256_ = sha256_hex(bytes);
  return file;
}

std::vector<std::byte> TensorFile::serialize() const {
  json header = json::object();
  if (!metadata_.empty()) header["__metadata__"] = metadata_;
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const uint64_t len = t.data.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + len}}};
    offset += len;
  }
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<std::byte> out(8 + text.size() + offset);
  const uint64_t header_len = text.size();
  std::memcpy(out.data(), &header_len, 8);
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::byte* dst = out.data() + 8 + text.size();
  for (const auto& [name, t] : tensors_) {
    std::memcpy(dst, t.data.data(), t.data.size() * 4);
    dst += t.data.size() * 4;
  }
  return out;
}

void TensorFile::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void TensorFile::add(std::string name, std::vector<int64_t> shape, std::vector<float> data) {
  Tensor t{std::move(shape), std::move(data)};
  if (static_cast<std::size_t>(t.numel()) != t.data.size())
    throw InputError(name + ": data length does not match shape");
  tensors_.insert_or_assign(std::move(name), std::move(t));
}

bool TensorFile::contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

const Tensor& TensorFile::at(std::string_view name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LoadError(std::string(name) + " absent");
  return it->second;
}

std::string tensor_sha256(const Tensor& t) {
  return sha256_hex(std::as_bytes(std::span(t.data)));
}

}  // namespace negsteer
