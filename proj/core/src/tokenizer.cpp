#include "negsteer/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "negsteer/errors.hpp"

namespace negsteer {
namespace {

using nlohmann::json;

constexpr std::string_view kEndOfWord = "</w>";

// Known spellings of the start/end tokens across released asset sets.
constexpr std::pair<std::string_view, std::string_view> kSpecialSpellings[] = {
    {"<|startoftext|>", "<|endoftext|>"},
    {"<start_of_text>", "<end_of_text>"},
};

void append_utf8(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xc0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xe0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  } else {
    out += static_cast<char>(0xf0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
    out += static_cast<char>(0x80 | (cp & 0x3f));
  }
}

// Reversible byte -> printable code point table used by byte-level BPE.
std::vector<std::string> make_byte_encoder() {
  std::vector<int> printable;
  for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
  for (int b = 0xa1; b <= 0xac; ++b) printable.push_back(b);
  for (int b = 0xae; b <= 0xff; ++b) printable.push_back(b);
  std::vector<std::string> table(256);
  int next = 0;
  for (int b = 0; b < 256; ++b) {
    uint32_t cp;
    if (std::find(printable.begin(), printable.end(), b) != printable.end()) {
      cp = static_cast<uint32_t>(b);
    } else {
      cp = static_cast<uint32_t>(256 + next++);
    }
    append_utf8(table[static_cast<std::size_t>(b)], cp);
  }
  return table;
}

struct CodePoint {
  uint32_t value;
  std::size_t length;  // bytes consumed
};

CodePoint decode_utf8(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xc0) == 0x80 ? (b & 0x3f) : -1;
  };
  if (c < 0x80) return {c, 1};
  if ((c & 0xe0) == 0xc0) {
    const int b1 = cont(1);
    if (b1 >= 0) return {((c & 0x1fu) << 6) | static_cast<uint32_t>(b1), 2};
  } else if ((c & 0xf0) == 0xe0) {
    const int b1 = cont(1), b2 = cont(2);
    if (b1 >= 0 && b2 >= 0)
      return {((c & 0x0fu) << 12) | (static_cast<uint32_t>(b1) << 6) | static_cast<uint32_t>(b2), 3};
  } else if ((c & 0xf8) == 0xf0) {
    const int b1 = cont(1), b2 = cont(2), b3 = cont(3);
    if (b1 >= 0 && b2 >= 0 && b3 >= 0)
      return {((c & 0x07u) << 18) | (static_cast<uint32_t>(b1) << 12) | (static_cast<uint32_t>(b2) << 6) |
                  static_cast<uint32_t>(b3),
              4};
  }
  return {0xfffd, 1};  // stray byte: one "other" symbol
}

enum class CharClass { Space, Letter, Number, Other };

// Approximates the \s / \p{L} / \p{N} classes of the reference pre-tokenizer.
// Exact for ASCII; outside ASCII, common punctuation, symbol and space blocks
// are classified explicitly and everything else counts as a letter.
CharClass classify(uint32_t cp) {
  if (cp < 0x80) {
    if (cp == ' ' || (cp >= '\t' && cp <= '\r') || (cp >= 0x1c && cp <= 0x1f)) return CharClass::Space;
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::Letter;
    if (cp >= '0' && cp <= '9') return CharClass::Number;
    return CharClass::Other;
  }
  if (cp == 0x85 || cp == 0xa0 || cp == 0x1680 || (cp >= 0x2000 && cp <= 0x200a) || cp == 0x2028 ||
      cp == 0x2029 || cp == 0x202f || cp == 0x205f || cp == 0x3000)
    return CharClass::Space;
  if (cp == 0xb2 || cp == 0xb3 || cp == 0xb9 || (cp >= 0xbc && cp <= 0xbe) || (cp >= 0x2070 && cp <= 0x2089) ||
      (cp >= 0x2150 && cp <= 0x2189) || (cp >= 0x2460 && cp <= 0x249b) || (cp >= 0xff10 && cp <= 0xff19))
    return CharClass::Number;
  if (cp == 0xaa || cp == 0xb5 || cp == 0xba) return CharClass::Letter;
  if (cp < 0xc0 || cp == 0xd7 || cp == 0xf7 || cp == 0xfffd || (cp >= 0x2000 && cp <= 0x2bff) ||
      (cp >= 0x3000 && cp <= 0x303f) || (cp >= 0xfe30 && cp <= 0xfe4f) || (cp >= 0xff00 && cp <= 0xff0f) ||
      (cp >= 0x1f000 && cp <= 0x1faff))
    return CharClass::Other;
  return CharClass::Letter;
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(offset), '\n'));
}

std::string merge_key(std::string_view a, std::string_view b) {
  std::string key;
  key.reserve(a.size() + b.size() + 1);
  key.append(a).append(" ").append(b);
  return key;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c == ' ' || (c >= '\t' && c <= '\r')) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch;
  }
  return out;
}

TokenizerAssets load_assets(const std::filesystem::path& vocab_file, const std::filesystem::path& merges_file,
                            int context_length) {
  TokenizerAssets assets;
  assets.context_length = context_length;

  std::ifstream vin(vocab_file);
  if (!vin) throw AssetError("cannot open vocabulary " + vocab_file.string());
  const std::string vtext((std::istreambuf_iterator<char>(vin)), std::istreambuf_iterator<char>());
  json vocab;
  try {
    vocab = json::parse(vtext);
  } catch (const json::parse_error& e) {
    throw AssetError(vocab_file.string() + ":" + std::to_string(line_of_offset(vtext, e.byte)) +
                     ": malformed vocabulary JSON");
  }
  if (!vocab.is_object()) throw AssetError(vocab_file.string() + ":1: vocabulary must be a JSON object");
  for (const auto& [token, id] : vocab.items()) {
    if (!id.is_number_integer()) {
      const auto pos = vtext.find(json(token).dump());
      throw AssetError(vocab_file.string() + ":" + std::to_string(line_of_offset(vtext, pos)) + ": id of token " +
                       json(token).dump() + " is not an integer");
    }
    assets.vocabulary.emplace(token, id.get<int32_t>());
  }

  std::ifstream min(merges_file);
  if (!min) throw AssetError("cannot open merges " + merges_file.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(min, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.starts_with("#")) continue;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string a, b, extra;
    if (!(fields >> a >> b) || (fields >> extra))
      throw AssetError(merges_file.string() + ":" + std::to_string(lineno) + ": expected two space-separated symbols");
    assets.merges.emplace_back(std::move(a), std::move(b));
  }

  for (const auto& [start, end] : kSpecialSpellings) {
    if (assets.vocabulary.contains(std::string(start)) && assets.vocabulary.contains(std::string(end))) {
      assets.start_token = start;
      assets.end_token = end;
      break;
    }
  }
  if (assets.start_token.empty()) throw ConfigError("vocabulary lacks start-of-text/end-of-text tokens");
  assets.start_id = assets.vocabulary.at(assets.start_token);
  assets.end_id = assets.vocabulary.at(assets.end_token);
  validate_assets(assets);
  return assets;
}

void validate_assets(const TokenizerAssets& assets) {
  if (assets.context_length < 3) throw ConfigError("context_length must be at least 3");
  const auto n = assets.vocab_size();
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (const auto& [token, id] : assets.vocabulary) {
    if (id < 0 || id >= n) throw AssetError("token " + json(token).dump() + " has id " + std::to_string(id) +
                                            " outside [0, " + std::to_string(n) + ")");
    if (seen[static_cast<std::size_t>(id)]) throw AssetError("id " + std::to_string(id) + " assigned twice");
    seen[static_cast<std::size_t>(id)] = true;
  }
  if (assets.start_token.empty() || !assets.vocabulary.contains(assets.start_token) ||
      !assets.vocabulary.contains(assets.end_token))
    throw ConfigError("start/end tokens missing from vocabulary");
  if (assets.start_id == assets.end_id) throw ConfigError("start and end tokens share an id");
  for (std::size_t i = 0; i < assets.merges.size(); ++i) {
    const auto& [a, b] = assets.merges[i];
    if (!assets.vocabulary.contains(a) || !assets.vocabulary.contains(b) || !assets.vocabulary.contains(a + b))
      throw AssetError("merge rule " + std::to_string(i + 1) + " (" + a + " " + b +
                       ") references a symbol outside the vocabulary");
  }
}

Tokenizer::Tokenizer(TokenizerAssets assets)
    : assets_(std::move(assets)), byte_encoder_(make_byte_encoder()), counters_(std::make_unique<Counters>()) {
  validate_assets(assets_);
  for (std::size_t i = 0; i < assets_.merges.size(); ++i)
    merge_ranks_.emplace(merge_key(assets_.merges[i].first, assets_.merges[i].second), static_cast<int>(i));
  for (std::size_t b = 0; b < byte_encoder_.size(); ++b) byte_decoder_.emplace(byte_encoder_[b], static_cast<unsigned char>(b));
  id_to_token_.resize(static_cast<std::size_t>(assets_.vocab_size()));
  for (const auto& [token, id] : assets_.vocabulary) id_to_token_[static_cast<std::size_t>(id)] = token;
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_file, const std::filesystem::path& merges_file,
                          int context_length) {
  return Tokenizer(load_assets(vocab_file, merges_file, context_length));
}

void Tokenizer::append_word(std::string_view piece, std::vector<int32_t>& out) const {
  std::vector<std::string> word;
  word.reserve(piece.size());
  for (const char c : piece) word.push_back(byte_encoder_[static_cast<unsigned char>(c)]);
  word.back().append(kEndOfWord);

  while (word.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < word.size(); ++i) {
      const auto it = merge_ranks_.find(merge_key(word[i], word[i + 1]));
      if (it != merge_ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const std::string first = word[best];
    const std::string second = word[best + 1];
    std::vector<std::string> merged;
    merged.reserve(word.size());
    for (std::size_t i = 0; i < word.size();) {
      if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
        merged.push_back(first + second);
        i += 2;
      } else {
        merged.push_back(std::move(word[i]));
        ++i;
      }
    }
    word = std::move(merged);
  }

  for (const auto& symbol : word) {
    const auto it = assets_.vocabulary.find(symbol);
    if (it == assets_.vocabulary.end()) {
      counters_->dropped.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    out.push_back(it->second);
  }
}

std::vector<int32_t> Tokenizer::encode_content(std::string_view text) const {
  const std::string s = normalize_text(text);
  std::vector<int32_t> ids;
  std::size_t i = 0;
  auto class_at = [&](std::size_t pos) { return classify(decode_utf8(s, pos).value); };
  while (i < s.size()) {
    const CodePoint cp = decode_utf8(s, i);
    const CharClass cls = classify(cp.value);
    if (cls == CharClass::Space) {
      i += cp.length;
      continue;
    }
    const std::string_view rest = std::string_view(s).substr(i);
    if (rest.starts_with(assets_.start_token)) {
      ids.push_back(assets_.start_id);
      i += assets_.start_token.size();
      continue;
    }
    if (rest.starts_with(assets_.end_token)) {
      ids.push_back(assets_.end_id);
      i += assets_.end_token.size();
      continue;
    }
    if (rest[0] == '\'') {
      std::size_t len = 0;
      for (std::string_view c : {"'re", "'ve", "'ll", "'s", "'t", "'m", "'d"}) {
        if (rest.starts_with(c)) {
          len = c.size();
          break;
        }
      }
      if (len > 0) {
        append_word(rest.substr(0, len), ids);
        i += len;
        continue;
      }
    }
    std::size_t j = i + cp.length;
    if (cls == CharClass::Letter || cls == CharClass::Other) {
      while (j < s.size() && class_at(j) == cls) j += decode_utf8(s, j).length;
    }
    append_word(std::string_view(s).substr(i, j - i), ids);
    i = j;
  }
  return ids;
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  auto content = encode_content(text);
  const auto max_content = static_cast<std::size_t>(assets_.context_length - 2);
  if (content.size() > max_content) {
    content.resize(max_content);
    counters_->truncated.fetch_add(1, std::memory_order_relaxed);
  }
  TokenSequence seq;
  seq.ids.reserve(static_cast<std::size_t>(assets_.context_length));
  seq.ids.push_back(assets_.start_id);
  seq.ids.insert(seq.ids.end(), content.begin(), content.end());
  seq.eos_index = static_cast<int>(seq.ids.size());
  seq.ids.resize(static_cast<std::size_t>(assets_.context_length), assets_.end_id);
  return seq;
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
  std::string joined;
  for (const auto id : ids) {
    if (id < 0 || id >= assets_.vocab_size()) continue;
    joined += id_to_token_[static_cast<std::size_t>(id)];
  }
  std::string bytes;
  for (std::size_t i = 0; i < joined.size();) {
    if (std::string_view(joined).substr(i).starts_with(kEndOfWord)) {
      bytes += ' ';
      i += kEndOfWord.size();
      continue;
    }
    const auto cp = decode_utf8(joined, i);
    const std::string ch = joined.substr(i, cp.length);
    const auto it = byte_decoder_.find(ch);
    if (it != byte_decoder_.end()) {
      bytes += static_cast<char>(it->second);
    } else {
      bytes += ch;
    }
    i += cp.length;
  }
  if (!bytes.empty() && bytes.back() == ' ') bytes.pop_back();
  return bytes;
}

}  // namespace negsteer
