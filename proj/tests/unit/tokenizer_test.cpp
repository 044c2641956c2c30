#include <gtest/gtest.h>

#include <fstream>
#include <json.hpp>

#include "negsteer/errors.hpp"
#include "negsteer/tokenizer.hpp"
#include "test_util.hpp"

using namespace negsteer;
using negsteer::testing::fixture;
using negsteer::testing::TempDir;
using negsteer::testing::write_file;

namespace {

const Tokenizer& clip_tokenizer() {
  static const Tokenizer tok =
      Tokenizer::load(fixture("clip_bpe/vocab.json"), fixture("clip_bpe/merges.txt"), 77);
  return tok;
}

std::vector<int32_t> content_span(const TokenSequence& s) {
  return {s.ids.begin(), s.ids.begin() + s.eos_index + 1};
}

}  // namespace

TEST(Tokenizer, MatchesReferenceOn200Captions) {
  const auto& tok = clip_tokenizer();
  std::ifstream in(fixture("tokenizer/reference_tokens.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto text = j["text"].get<std::string>();
    const auto expected = j["ids"].get<std::vector<int32_t>>();
    const auto seq = tok.encode(text);
    ASSERT_EQ(seq.ids.size(), 77u);
    EXPECT_EQ(content_span(seq), expected) << text;
    for (std::size_t i = static_cast<std::size_t>(seq.eos_index) + 1; i < seq.ids.size(); ++i)
      EXPECT_EQ(seq.ids[i], tok.pad_id());
    ++n;
  }
  EXPECT_EQ(n, 200);
}

TEST(Tokenizer, WorkedExample) {
  const auto seq = clip_tokenizer().encode("a photo of a cat");
  EXPECT_EQ(content_span(seq), (std::vector<int32_t>{49406, 320, 1125, 539, 320, 2368, 49407}));
  EXPECT_EQ(seq.eos_index, 6);
}

TEST(Tokenizer, EmptyInputIsStartThenEnd) {
  const auto seq = clip_tokenizer().encode("");
  EXPECT_EQ(seq.eos_index, 1);
  EXPECT_EQ(seq.ids[0], 49406);
  EXPECT_EQ(seq.ids[1], 49407);
  EXPECT_EQ(clip_tokenizer().encode("   \t\n ").eos_index, 1);
}

TEST(Tokenizer, TruncatesLongInputAndCounts) {
  Tokenizer tok = Tokenizer::load(fixture("clip_bpe/vocab.json"), fixture("clip_bpe/merges.txt"), 77);
  std::string text;
  for (int i = 0; i < 100; ++i) text += "dog ";
  const auto seq = tok.encode(text);
  EXPECT_EQ(seq.eos_index, 76);
  EXPECT_EQ(seq.ids[76], 49407);
  EXPECT_EQ(tok.truncated_count(), 1u);
  tok.encode("short");
  EXPECT_EQ(tok.truncated_count(), 1u);
}

TEST(Tokenizer, DeterministicAndNormalizationIdempotent) {
  const auto& tok = clip_tokenizer();
  const std::string s = "  A   Dog\tWITH no   Leash ";
  EXPECT_EQ(tok.encode(s).ids, tok.encode(s).ids);
  EXPECT_EQ(normalize_text(s), "a dog with no leash");
  EXPECT_EQ(normalize_text(normalize_text(s)), normalize_text(s));
  EXPECT_EQ(tok.encode(s).ids, tok.encode(normalize_text(s)).ids);
}

TEST(Tokenizer, DecodeRoundTripsAscii) {
  const auto& tok = clip_tokenizer();
  const auto content = tok.encode_content("a supermarket scene with a shopping cart but no cashier");
  EXPECT_EQ(tok.decode(content), "a supermarket scene with a shopping cart but no cashier");
}

TEST(TokenizerAssets, MissingEndTokenIsConfigError) {
  TempDir dir;
  write_file(dir / "vocab.json", R"({"a": 0, "b": 1, "a</w>": 2, "<|startoftext|>": 3})");
  write_file(dir / "merges.txt", "");
  EXPECT_THROW(load_assets(dir / "vocab.json", dir / "merges.txt", 8), ConfigError);
}

TEST(TokenizerAssets, MalformedMergeLineNamesLine) {
  TempDir dir;
  write_file(dir / "vocab.json",
             R"({"a": 0, "b": 1, "a</w>": 2, "b</w>": 3, "ab</w>": 4, "<|startoftext|>": 5, "<|endoftext|>": 6})");
  write_file(dir / "merges.txt", "#version: x\na b</w>\nthree parts here\n");
  try {
    load_assets(dir / "vocab.json", dir / "merges.txt", 8);
    FAIL();
  } catch (const AssetError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
}

TEST(TokenizerAssets, MalformedVocabularyIsAssetError) {
  TempDir dir;
  write_file(dir / "vocab.json", R"({"a": 0, "b": "one"})");
  write_file(dir / "merges.txt", "");
  EXPECT_THROW(load_assets(dir / "vocab.json", dir / "merges.txt", 8), AssetError);
  write_file(dir / "vocab.json", "{not json");
  EXPECT_THROW(load_assets(dir / "vocab.json", dir / "merges.txt", 8), AssetError);
}

TEST(TokenizerAssets, EmptyMergesStillTokenizesPerCharacter) {
  TempDir dir;
  write_file(dir / "vocab.json",
             R"({"a": 0, "b": 1, "a</w>": 2, "b</w>": 3, "<|startoftext|>": 4, "<|endoftext|>": 5})");
  write_file(dir / "merges.txt", "");
  const Tokenizer tok(load_assets(dir / "vocab.json", dir / "merges.txt", 8));
  const auto seq = tok.encode("ab ba");
  EXPECT_EQ(std::vector<int32_t>(seq.ids.begin(), seq.ids.begin() + seq.eos_index + 1),
            (std::vector<int32_t>{4, 0, 3, 1, 2, 5}));
}

TEST(TokenizerAssets, MergeReferencingUnknownTokenRejected) {
  TempDir dir;
  write_file(dir / "vocab.json", R"({"a": 0, "b": 1, "a</w>": 2, "b</w>": 3, "<|startoftext|>": 4, "<|endoftext|>": 5})");
  write_file(dir / "merges.txt", "a b</w>\n");
  EXPECT_THROW(load_assets(dir / "vocab.json", dir / "merges.txt", 8), AssetError);
}

TEST(TinyTokenizer, MergesCuesAndDropsUnknownSymbols) {
  Tokenizer tok = Tokenizer::load(fixture("tiny_clip/vocab.json"), fixture("tiny_clip/merges.txt"), 32);
  const auto ids = tok.encode_content("the cat without no");
  // the</w>=56, c a t</w>, without</w>=61, no</w>=52
  EXPECT_EQ(ids, (std::vector<int32_t>{56, 2, 0, 45, 61, 52}));
  EXPECT_EQ(tok.dropped_symbol_count(), 0u);
  tok.encode_content("a1");
  EXPECT_EQ(tok.dropped_symbol_count(), 1u);
}
