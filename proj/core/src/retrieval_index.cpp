#include "negsteer/retrieval_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#include <json.hpp>

#include "negsteer/errors.hpp"
#include "negsteer/hashing.hpp"
#include "negsteer/probe.hpp"
#include "negsteer/tensor_file.hpp"

namespace negsteer {
namespace {

using nlohmann::json;

// Strict weak order: higher score first, then smaller id.
bool ranks_before(double sa, const std::string& a, double sb, const std::string& b) {
  if (sa != sb) return sa > sb;
  return a < b;
}

}  // namespace

void EmbeddingIndex::add(EmbeddingRecord record) {
  if (frozen_) throw InputError("index is frozen");
  if (record.image_id.empty()) throw InputError("record with empty image_id");
  if (dimension_ == 0) dimension_ = record.vector.size();
  if (record.vector.size() != dimension_ || dimension_ == 0)
    throw InputError(record.image_id + ": dimension " + std::to_string(record.vector.size()) + " != " +
                     std::to_string(dimension_));
  if (rows_.contains(record.image_id)) throw InputError("duplicate image_id " + record.image_id);
  double sq = 0.0;
  for (const float v : record.vector) {
    if (!std::isfinite(v)) throw InputError(record.image_id + ": non-finite vector");
    sq += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(sq);
  if (norm == 0.0) throw InputError(record.image_id + ": zero vector cannot be normalized");
  if (std::abs(norm - 1.0) > kNormDriftTolerance)
    throw InputError(record.image_id + ": norm " + std::to_string(norm) + " is not unit within 1e-2");
  rows_.emplace(record.image_id, ids_.size());
  for (const float v : record.vector) matrix_.push_back(static_cast<float>(v / norm));
  ids_.push_back(std::move(record.image_id));
  sources_.push_back(std::move(record.source));
}

void EmbeddingIndex::freeze() {
  if (ids_.empty()) throw InputError("cannot freeze an empty index");
  Sha256 h;
  h.update("negsteer.index/1\n" + std::to_string(dimension_) + "\n");
  for (const auto& id : ids_) {
    h.update(id);
    h.update(std::string_view("\0", 1));
  }
  h.update(std::as_bytes(std::span(matrix_)));
  content_hash_ = h.hex_digest();
  frozen_ = true;
}

std::span<const float> EmbeddingIndex::vector(std::size_t row) const {
  if (row >= ids_.size()) throw InputError("row out of range");
  return std::span<const float>(matrix_).subspan(row * dimension_, dimension_);
}

std::optional<std::size_t> EmbeddingIndex::find(std::string_view image_id) const {
  const auto it = rows_.find(std::string(image_id));
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

RankedResult EmbeddingIndex::topk(std::span<const float> query, std::size_t k) const {
  if (!frozen_) throw InputError("index must be frozen before querying");
  if (k < 1 || k > ids_.size())
    throw InputError("k=" + std::to_string(k) + " outside [1, " + std::to_string(ids_.size()) + "]");
  if (query.size() != dimension_) throw InputError("query dimension does not match index");
  double qn = 0.0;
  for (const float v : query) qn += static_cast<double>(v) * v;
  qn = std::sqrt(qn);
  if (!(qn > 0.0) || !std::isfinite(qn)) throw InputError("query vector has zero or non-finite norm");
  std::vector<double> q(query.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = query[i] / qn;

  // Max-heap on "worst kept" so the top always holds the candidate to evict.
  using Entry = std::pair<double, std::size_t>;
  auto worse = [this](const Entry& a, const Entry& b) { return ranks_before(a.first, ids_[a.second], b.first, ids_[b.second]); };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    const float* row = matrix_.data() + r * dimension_;
    double s = 0.0;
    for (std::size_t i = 0; i < dimension_; ++i) s += q[i] * row[i];
    if (heap.size() < k) {
      heap.emplace(s, r);
    } else if (ranks_before(s, ids_[r], heap.top().first, ids_[heap.top().second])) {
      heap.pop();
      heap.emplace(s, r);
    }
  }
  RankedResult out;
  out.items.resize(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    const auto [s, r] = heap.top();
    heap.pop();
    out.items[i] = {ids_[r], s, sources_[r]};
  }
  return out;
}

void EmbeddingIndex::save(const std::filesystem::path& path, const std::map<std::string, std::string>& annotations) const {
  if (!frozen_) throw InputError("only frozen indexes can be saved");
  TensorFile file;
  file.add("embeddings", {static_cast<int64_t>(ids_.size()), static_cast<int64_t>(dimension_)}, matrix_);
  file.metadata()["format"] = "negsteer.index/1";
  const auto bytes = file.serialize();
  file.write(path);
  json doc = {{"format", "negsteer.index/1"},
              {"dimension", dimension_},
              {"size", ids_.size()},
              {"image_ids", ids_},
              {"sources", sources_},
              {"content_hash", content_hash_},
              {"annotations", annotations},
              {"container_sha256", sha256_hex(bytes)}};
  std::ofstream out(sidecar_path(path), std::ios::trunc);
  if (!out) throw InputError("cannot write " + sidecar_path(path).string());
  out << doc.dump(1) << '\n';
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("index not found: " + path.string());
  const auto file = TensorFile::read(path);
  std::ifstream in(sidecar_path(path));
  if (!in) throw LoadError("index sidecar not found: " + sidecar_path(path).string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(sidecar_path(path).string() + ": " + e.what());
  }
  if (doc.value("container_sha256", "") != file.source_sha256())
    throw LoadError(path.string() + ": container hash does not match its sidecar");
  const auto& t = file.at("embeddings");
  const auto ids = doc.at("image_ids").get<std::vector<std::string>>();
  const auto sources = doc.value("sources", std::vector<std::string>(ids.size()));
  if (t.shape.size() != 2 || static_cast<std::size_t>(t.shape[0]) != ids.size())
    throw LoadError(path.string() + ": embeddings shape does not match image_ids");
  const auto dim = static_cast<std::size_t>(t.shape[1]);
  EmbeddingIndex index(dim);
  // Stored rows are already unit-normalized; adopt them bit-for-bit so the
  // content hash reproduces.
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (!index.rows_.emplace(ids[r], r).second) throw LoadError(path.string() + ": duplicate image_id " + ids[r]);
    index.ids_.push_back(ids[r]);
    index.sources_.push_back(r < sources.size() ? sources[r] : std::string());
  }
  index.matrix_ = t.data;
  index.freeze();
  if (index.content_hash() != doc.value("content_hash", ""))
    throw LoadError(path.string() + ": content hash mismatch");
  return index;
}

std::vector<EmbeddingRecord> read_embedding_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("records file not found: " + path.string());
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("vector").get<std::vector<float>>(),
                     j.value("source", std::string())});
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<EmbeddingRecord> read_embedding_container(const std::filesystem::path& path) {
  const auto file = TensorFile::read(path);
  std::ifstream in(sidecar_path(path));
  if (!in) throw InputError("embedding sidecar not found: " + sidecar_path(path).string());
  const auto doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.contains("image_ids")) throw InputError(sidecar_path(path).string() + ": lacks image_ids");
  const auto ids = doc.at("image_ids").get<std::vector<std::string>>();
  const auto sources = doc.value("sources", std::vector<std::string>());
  const auto& t = file.at("embeddings");
  if (t.shape.size() != 2 || static_cast<std::size_t>(t.shape[0]) != ids.size())
    throw InputError(path.string() + ": embeddings shape does not match image_ids");
  const auto dim = static_cast<std::size_t>(t.shape[1]);
  std::vector<EmbeddingRecord> out;
  for (std::size_t r = 0; r < ids.size(); ++r)
    out.push_back({ids[r],
                   std::vector<float>(t.data.begin() + static_cast<long>(r * dim),
                                      t.data.begin() + static_cast<long>((r + 1) * dim)),
                   r < sources.size() ? sources[r] : std::string()});
  return out;
}

std::vector<BenchmarkCase> read_benchmark_cases(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("benchmark file not found: " + path.string());
  std::vector<BenchmarkCase> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      BenchmarkCase c;
      c.query = j.at("query").get<std::string>();
      c.positives = j.value("positives", std::vector<std::string>());
      c.benchmark = j.value("benchmark", std::string());
      c.id = j.value("id", c.benchmark + ":" + std::to_string(lineno));
      out.push_back(std::move(c));
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

int recall_at_k(const RankedResult& ranked, const std::unordered_set<std::string>& positives, std::size_t k) {
  if (positives.empty()) throw InputError("empty positive set");
  if (k < 1 || k > ranked.items.size()) throw InputError("k exceeds the ranked list length");
  for (std::size_t i = 0; i < k; ++i)
    if (positives.contains(ranked.items[i].image_id)) return 1;
  return 0;
}

int recall_at_k(const RankedResult& ranked, std::span<const std::string> positives, std::size_t k) {
  return recall_at_k(ranked, std::unordered_set<std::string>(positives.begin(), positives.end()), k);
}

double mean_recall_at_k(std::span<const RankedResult> ranked, std::span<const BenchmarkCase> cases, std::size_t k) {
  if (ranked.size() != cases.size()) throw InputError("result/case count mismatch");
  if (cases.empty()) throw InputError("no benchmark cases");
  double hits = 0.0;
  for (std::size_t i = 0; i < cases.size(); ++i) hits += recall_at_k(ranked[i], cases[i].positives, k);
  return hits / static_cast<double>(cases.size());
}

void check_positives(const EmbeddingIndex& index, std::span<const BenchmarkCase> cases) {
  for (const auto& c : cases) {
    if (c.positives.empty()) throw InputError(c.id + ": empty positive set");
    for (const auto& p : c.positives)
      if (!index.find(p)) throw InputError(c.id + ": positive " + p + " not in index");
  }
}

}  // namespace negsteer
