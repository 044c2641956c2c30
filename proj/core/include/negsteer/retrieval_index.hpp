#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace negsteer {

struct EmbeddingRecord {
  std::string image_id;
  std::vector<float> vector;
  std::string source;  // optional file path or URI
};

struct ScoredImage {
  std::string image_id;
  double score = 0.0;
  std::string source;
};

/// Results in descending score; equal scores ordered by image_id.
struct RankedResult {
  std::string query;
  std::vector<ScoredImage> items;
};

/// Exact cosine top-k over unit-normalized image embeddings.
///
/// Records are re-normalized on ingest; a record whose norm deviates from 1 by
/// more than 1e-2 is rejected. Queries are rejected until freeze().
class EmbeddingIndex {
 public:
  static constexpr double kNormDriftTolerance = 1e-2;

  EmbeddingIndex() = default;
  explicit EmbeddingIndex(std::size_t dimension) : dimension_(dimension) {}

  /// Throws InputError on dimension mismatch, duplicate id, non-finite or
  /// out-of-tolerance norm, or when frozen.
  void add(EmbeddingRecord record);
  void freeze();

  bool frozen() const { return frozen_; }
  std::size_t size() const { return ids_.size(); }
  std::size_t dimension() const { return dimension_; }
  /// Available once frozen.
  const std::string& content_hash() const { return content_hash_; }

  const std::string& image_id(std::size_t row) const { return ids_.at(row); }
  const std::string& source(std::size_t row) const { return sources_.at(row); }
  std::span<const float> vector(std::size_t row) const;
  std::optional<std::size_t> find(std::string_view image_id) const;

  /// The query is normalized first, so any positive scaling ranks identically.
  RankedResult topk(std::span<const float> query, std::size_t k) const;

  /// Writes "<path>" (tensor "embeddings", N x dim) and "<path>.json".
  void save(const std::filesystem::path& path, const std::map<std::string, std::string>& annotations = {}) const;
  /// Loads and freezes; throws LoadError if the stored hash does not verify.
  static EmbeddingIndex load(const std::filesystem::path& path);

 private:
  std::size_t dimension_ = 0;
  bool frozen_ = false;
  std::vector<std::string> ids_;
  std::vector<std::string> sources_;
  std::vector<float> matrix_;
  std::unordered_map<std::string, std::size_t> rows_;
  std::string content_hash_;
};

template <typename Range>
EmbeddingIndex ingest(Range&& records) {
  EmbeddingIndex index;
  for (auto&& r : records) index.add(r);
  return index;
}

/// JSON Lines {"image_id", "vector": [...], "source"?}.
std::vector<EmbeddingRecord> read_embedding_records(const std::filesystem::path& path);
/// Container with tensor "embeddings" plus sidecar holding "image_ids" and optional "sources".
std::vector<EmbeddingRecord> read_embedding_container(const std::filesystem::path& path);

struct BenchmarkCase {
  std::string id;
  std::string query;
  std::vector<std::string> positives;
  std::string benchmark;
};

/// JSON Lines {"query", "positives", "benchmark", "id"?}. Missing ids become
/// "<benchmark>:<line>".
std::vector<BenchmarkCase> read_benchmark_cases(const std::filesystem::path& path);

/// 1 iff any of the first k results is a positive. Throws InputError for an
/// empty positive set or k beyond the result length.
int recall_at_k(const RankedResult& ranked, const std::unordered_set<std::string>& positives, std::size_t k);
int recall_at_k(const RankedResult& ranked, std::span<const std::string> positives, std::size_t k);

/// Mean of recall_at_k over aligned (result, case) pairs.
double mean_recall_at_k(std::span<const RankedResult> ranked, std::span<const BenchmarkCase> cases, std::size_t k);

/// Checks every positive id exists in the index; throws InputError naming the first missing one.
void check_positives(const EmbeddingIndex& index, std::span<const BenchmarkCase> cases);

}  // namespace negsteer
