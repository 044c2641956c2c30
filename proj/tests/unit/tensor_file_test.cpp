#include <gtest/gtest.h>

#include <cstring>

#include "negsteer/errors.hpp"
#include "negsteer/hashing.hpp"
#include "negsteer/tensor_file.hpp"
#include "test_util.hpp"

using namespace negsteer;
using negsteer::testing::TempDir;

TEST(Hashing, KnownSha256Vectors) {
  EXPECT_EQ(sha256_hex(std::string_view("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex(std::string_view("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  Sha256 h;
  h.update(std::string_view("a"));
  h.update(std::string_view("bc"));
  EXPECT_EQ(h.hex_digest(), sha256_hex(std::string_view("abc")));
}

TEST(Hashing, Base64RoundTripAllLengths) {
  std::vector<std::byte> bytes;
  for (int n = 0; n < 40; ++n) {
    const auto enc = base64_encode(bytes);
    EXPECT_EQ(enc.size() % 4, 0u);
    EXPECT_EQ(base64_decode(enc), bytes) << n;
    bytes.push_back(static_cast<std::byte>(n * 37 + 11));
  }
  const std::string text = "any carnal pleas";
  EXPECT_EQ(base64_encode(std::as_bytes(std::span(text.data(), text.size()))), "YW55IGNhcm5hbCBwbGVhcw==");
}

TEST(TensorFile, RoundTripIsByteStable) {
  TempDir dir;
  TensorFile f;
  f.add("b", {2, 3}, {1, 2, 3, 4, 5, 6});
  f.add("a", {1}, {-0.5f});
  f.metadata()["k"] = "v";
  f.write(dir / "x.safetensors");
  const auto back = TensorFile::read(dir / "x.safetensors");
  EXPECT_EQ(back.at("b").shape, (std::vector<int64_t>{2, 3}));
  EXPECT_EQ(back.at("b").data, (std::vector<float>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(back.at("a").data[0], -0.5f);
  EXPECT_EQ(back.metadata().at("k"), "v");
  EXPECT_EQ(back.serialize(), f.serialize());
  EXPECT_EQ(back.source_sha256(), sha256_file(dir / "x.safetensors"));
  const auto bytes = f.serialize();
  uint64_t header = 0;
  std::memcpy(&header, bytes.data(), 8);
  EXPECT_EQ(header % 8, 0u);
}

TEST(TensorFile, AbsentTensorNamed) {
  TensorFile f;
  f.add("a", {1}, {1});
  try {
    f.at("text_projection");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("text_projection"), std::string::npos);
  }
}

TEST(TensorFile, DecodesHalfPrecision) {
  // Hand-built container: F16 [1.0, -2.0] and BF16 [0.5].
  const std::string header =
      R"({"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},"g":{"dtype":"BF16","shape":[1],"data_offsets":[4,6]}})";
  std::vector<std::byte> bytes(8);
  const uint64_t n = header.size();
  std::memcpy(bytes.data(), &n, 8);
  for (char c : header) bytes.push_back(static_cast<std::byte>(c));
  for (const uint8_t b : {0x00, 0x3c, 0x00, 0xc0, 0x00, 0x3f}) bytes.push_back(static_cast<std::byte>(b));
  const auto f = TensorFile::parse(bytes);
  EXPECT_EQ(f.at("h").data, (std::vector<float>{1.0f, -2.0f}));
  EXPECT_EQ(f.at("g").data, (std::vector<float>{0.5f}));
}

TEST(TensorFile, RejectsTruncatedAndOutOfRange) {
  std::vector<std::byte> tiny(4);
  EXPECT_THROW(TensorFile::parse(tiny), LoadError);
  const std::string header = R"({"h":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
  std::vector<std::byte> bytes(8);
  const uint64_t n = header.size();
  std::memcpy(bytes.data(), &n, 8);
  for (char c : header) bytes.push_back(static_cast<std::byte>(c));
  bytes.resize(bytes.size() + 8);
  EXPECT_THROW(TensorFile::parse(bytes), LoadError);
}
