#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace negsteer {

/// Vocabulary, merge rules and special tokens of a byte-level BPE model.
struct TokenizerAssets {
  std::unordered_map<std::string, int32_t> vocabulary;
  std::vector<std::pair<std::string, std::string>> merges;  // priority order
  std::string start_token;
  std::string end_token;
  int32_t start_id = -1;
  int32_t end_id = -1;
  int context_length = 0;

  int32_t vocab_size() const { return static_cast<int32_t>(vocabulary.size()); }
};

/// Reads a JSON vocabulary (token -> id) and a merges file (one "a b" pair per
/// line, optional "#" header). Throws AssetError for malformed content and
/// ConfigError when the start/end tokens are missing.
TokenizerAssets load_assets(const std::filesystem::path& vocab_file,
                            const std::filesystem::path& merges_file, int context_length);

/// Validates the asset invariants; called by load_assets.
void validate_assets(const TokenizerAssets& assets);

/// Fixed-length token ids, start token first, padded with the end token.
struct TokenSequence {
  std::vector<int32_t> ids;
  int eos_index = 0;
};

/// Lowercase (ASCII) and collapse whitespace runs to one space, trimmed.
std::string normalize_text(std::string_view text);

class Tokenizer {
 public:
  explicit Tokenizer(TokenizerAssets assets);
  static Tokenizer load(const std::filesystem::path& vocab_file,
                        const std::filesystem::path& merges_file, int context_length);

  /// Total: never throws once constructed. Content beyond context_length - 2
  /// tokens is dropped from the right and counted in truncated_count().
  TokenSequence encode(std::string_view text) const;

  /// Content ids only: no start/end tokens, no truncation.
  std::vector<int32_t> encode_content(std::string_view text) const;

  /// Joins token strings, mapping end-of-word markers back to spaces; the
  /// trailing one is dropped. Test aid.
  std::string decode(std::span<const int32_t> ids) const;

  const TokenizerAssets& assets() const { return assets_; }
  int context_length() const { return assets_.context_length; }
  int32_t start_id() const { return assets_.start_id; }
  int32_t end_id() const { return assets_.end_id; }
  int32_t pad_id() const { return assets_.end_id; }

  std::size_t truncated_count() const { return counters_->truncated.load(); }
  /// Symbols with no vocabulary entry (only possible with reduced vocabularies).
  std::size_t dropped_symbol_count() const { return counters_->dropped.load(); }

 private:
  struct Counters {
    std::atomic<std::size_t> truncated{0};
    std::atomic<std::size_t> dropped{0};
  };

  void append_word(std::string_view piece, std::vector<int32_t>& out) const;

  TokenizerAssets assets_;
  std::unordered_map<std::string, int> merge_ranks_;
  std::vector<std::string> byte_encoder_;
  std::unordered_map<std::string, unsigned char> byte_decoder_;
  std::vector<std::string> id_to_token_;
  std::unique_ptr<Counters> counters_;
};

}  // namespace negsteer
