#include "negsteer/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "negsteer/chat_client.hpp"
#include "negsteer/errors.hpp"
#include "negsteer/hashing.hpp"
#include "negsteer/judge.hpp"
#include "negsteer/pca.hpp"
#include "negsteer/probe.hpp"
#include "negsteer/retrieval_index.hpp"
#include "negsteer/steering.hpp"
#include "negsteer/svg_plot.hpp"
#include "negsteer/text_encoder.hpp"
#include "negsteer/tokenizer.hpp"

namespace negsteer::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json defaults() {
  return {
      {"vocab", ""},
      {"merges", ""},
      {"weights", ""},
      {"pairs", ""},
      {"texts", ""},
      {"records", ""},
      {"probes", ""},
      {"direction", ""},
      {"index", ""},
      {"benchmark", ""},
      {"results", ""},
      {"image_root", ""},
      {"cache_dir", "cache"},
      {"output_dir", "out"},
      {"seed", 0},
      {"split_ratio", 0.8},
      {"threads", 1},
      {"k", 10},
      {"probe", {{"inverse_regularization", 1.0}, {"max_iterations", 1000}, {"gradient_tolerance", 1e-4}}},
      {"steering",
       {{"alpha", 0.13},
        {"layers", json::array()},
        {"positions", "eos"},
        {"gating", "auto"},
        {"enabled", true},
        {"lexicon", ""}}},
      {"judge",
       {{"base_url", ""},
        {"model", ""},
        {"question_base_url", ""},
        {"question_model", ""},
        {"concurrency", 4},
        {"k", 5},
        {"requests_per_second", 0.0},
        {"temperature", 0.0},
        {"timeout_seconds", 120},
        {"max_transport_attempts", 5},
        {"base_delay_ms", 1000},
        {"max_format_attempts", 3}}},
      {"ablation", {{"grid", "0,0.13,0.5,0.9"}, {"mode", "recall"}}},
  };
}

// Typed view over the merged configuration.
class Config {
 public:
  explicit Config(json doc) : doc_(std::move(doc)), hash_(sha256_hex(doc_.dump()).substr(0, 16)) {}

  const json& doc() const { return doc_; }
  const std::string& hash() const { return hash_; }

  const json& at(const std::string& dotted) const {
    const json* node = &doc_;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!node->is_object() || !node->contains(part)) throw ConfigError("config key missing: " + dotted);
      node = &(*node)[part];
    }
    return *node;
  }

  std::string str(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_string()) throw ConfigError("config key " + key + " must be a string");
    return v.get<std::string>();
  }
  double num(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number()) throw ConfigError("config key " + key + " must be a number");
    return v.get<double>();
  }
  int64_t integer(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("config key " + key + " must be an integer");
    return v.get<int64_t>();
  }
  std::size_t count(const std::string& key, int64_t min = 1) const {
    const auto v = integer(key);
    if (v < min) throw ConfigError("config key " + key + " must be >= " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }
  bool flag(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_boolean()) throw ConfigError("config key " + key + " must be a boolean");
    return v.get<bool>();
  }

  // Path that must exist at command start.
  fs::path existing(const std::string& key, const std::string& what) const {
    const auto p = str(key);
    if (p.empty()) throw ConfigError(what + " not configured (" + key + ")");
    if (!fs::exists(p)) throw InputError(what + " not found: " + p);
    return p;
  }

  uint64_t seed() const {
    const auto& v = at("seed");
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0))
      throw ConfigError("seed must be a non-negative integer");
    return v.get<uint64_t>();
  }

  fs::path output_dir() const {
    const fs::path p = str("output_dir");
    fs::create_directories(p);
    return p;
  }

  SteeringConfig steering() const {
    SteeringConfig c;
    c.alpha = num("steering.alpha");
    for (const auto& l : at("steering.layers")) {
      if (!l.is_number_integer()) throw ConfigError("steering.layers must hold integers");
      c.layers.push_back(l.get<int>());
    }
    c.positions = parse_positions(str("steering.positions"));
    c.gating = parse_gating(str("steering.gating"));
    c.enabled = flag("steering.enabled");
    return c;
  }

  NegationLexicon lexicon() const {
    const auto p = str("steering.lexicon");
    if (p.empty()) return NegationLexicon();
    if (!fs::exists(p)) throw InputError("lexicon not found: " + p);
    return NegationLexicon::load(p);
  }

 private:
  json doc_;
  std::string hash_;
};

// Sets a dotted key, creating objects on the way.
void set_key(json& doc, const std::string& dotted, const json& value) {
  json* node = &doc;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty config key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      throw ConfigError("unknown config key: " + dotted);
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) throw ConfigError("unknown config key: " + dotted);
  (*node)[parts.back()] = value;
}

// Replaces known keys only, so typos in config files are rejected instead of ignored.
void overlay(json& base, const json& patch, const std::string& prefix = "") {
  if (!patch.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : patch.items()) {
    const auto name = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key: " + name);
    if (base[key].is_object() && value.is_object())
      overlay(base[key], value, name);
    else
      base[key] = value;
  }
}

json parse_override_value(const std::string& text) {
  auto v = json::parse(text, nullptr, false);
  if (v.is_discarded()) return text;
  return v;
}

// ---------------------------------------------------------------------------
// Artifacts

json provenance(const Config& cfg, const std::optional<fs::path>& direction_path = std::nullopt,
                const EncoderWeights* weights = nullptr) {
  json p = {{"config_hash", cfg.hash()}, {"seed", cfg.seed()}};
  p["encoder_identity"] = weights ? json(weights->identity) : json(nullptr);
  if (direction_path) {
    const auto d = load_direction(*direction_path);
    p["direction"] = {{"container_sha256", sha256_file(*direction_path)},
                      {"dataset_hash", d.provenance.dataset_hash},
                      {"split_seed", d.provenance.split_seed},
                      {"encoder_identity", d.provenance.encoder_identity}};
  } else {
    p["direction"] = nullptr;
  }
  return p;
}

std::map<std::string, std::string> annotations(const json& prov) {
  return {{"config_hash", prov["config_hash"].get<std::string>()},
          {"seed", std::to_string(prov["seed"].get<uint64_t>())},
          {"provenance", prov.dump()}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::string content_hash(json body) {
  body.erase("content_sha256");
  return sha256_hex(body.dump());
}

// Self-verifying JSON artifact.
void write_json_artifact(const fs::path& path, json body, const json& prov) {
  body["provenance"] = prov;
  body["content_sha256"] = content_hash(body);
  write_text(path, body.dump(2) + "\n");
}

// Non-JSON outputs carry a "<path>.json" sidecar holding the file hash.
void write_sidecar(const fs::path& path, const json& prov) {
  const json side = {{"format", "negsteer.artifact/1"},
                     {"provenance", prov},
                     {"container_sha256", sha256_file(path)}};
  write_text(sidecar_path(path), side.dump(1) + "\n");
}

void write_jsonl_artifact(const fs::path& path, const std::vector<json>& lines, const json& prov) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  write_text(path, text);
  write_sidecar(path, prov);
}

// ---------------------------------------------------------------------------
// Shared loading

struct Encoder {
  EncoderWeights weights;
  Tokenizer tokenizer;
};

Encoder load_encoder(const Config& cfg) {
  const auto weights_path = cfg.existing("weights", "weights");
  const auto vocab = cfg.existing("vocab", "vocabulary");
  const auto merges = cfg.existing("merges", "merges");
  auto weights = load_weights(weights_path);
  auto tokenizer = Tokenizer::load(vocab, merges, weights.config.context_length);
  return {std::move(weights), std::move(tokenizer)};
}

std::optional<NegationDirection> load_direction_if(const Config& cfg, const SteeringConfig& steering) {
  const auto p = cfg.str("direction");
  if (p.empty()) {
    if (steering.enabled && steering.gating != Gating::Never)
      throw ConfigError("steering is enabled but no direction is configured (set steering.gating=never to disable)");
    return std::nullopt;
  }
  if (!fs::exists(p)) throw InputError("direction not found: " + p);
  return load_direction(p);
}

std::optional<fs::path> direction_path(const Config& cfg) {
  const auto p = cfg.str("direction");
  if (p.empty()) return std::nullopt;
  return fs::path(p);
}

json scored_json(const ScoredImage& s) { return {{"image_id", s.image_id}, {"score", s.score}, {"source", s.source}}; }

std::vector<BenchmarkCase> load_cases(const Config& cfg) {
  auto cases = read_benchmark_cases(cfg.existing("benchmark", "benchmark"));
  if (cases.empty()) throw InputError("benchmark file has no cases");
  return cases;
}

struct Query {
  std::string id;
  std::string text;
  std::vector<std::string> positives;
  std::string benchmark;
};

struct Retrieved {
  Query query;
  bool steered = false;
  RankedResult ranked;
};

std::vector<Retrieved> retrieve_all(const std::vector<Query>& queries, const QueryEmbedder& embedder,
                                    const EmbeddingIndex& index, std::size_t k) {
  if (k > index.size())
    throw InputError("k = " + std::to_string(k) + " exceeds index size " + std::to_string(index.size()));
  std::vector<Retrieved> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    const auto e = embedder.embed(q.text);
    Retrieved r{q, embedder.should_steer(q.text), index.topk(e.vector, k)};
    r.ranked.query = q.text;
    out.push_back(std::move(r));
  }
  return out;
}

json ranked_line(const Retrieved& r) {
  json items = json::array();
  for (const auto& s : r.ranked.items) items.push_back(scored_json(s));
  return {{"query_id", r.query.id},   {"query", r.query.text},         {"steered", r.steered},
          {"benchmark", r.query.benchmark}, {"positives", r.query.positives}, {"results", items}};
}

std::vector<Query> queries_from_cases(const std::vector<BenchmarkCase>& cases) {
  std::vector<Query> qs;
  for (const auto& c : cases) qs.push_back({c.id, c.query, c.positives, c.benchmark});
  return qs;
}

// ---------------------------------------------------------------------------
// Judging

struct JudgeRun {
  MetricReport report;
  std::vector<JudgeVerdict> verdicts;
};

struct RankedInput {
  std::string query_id;
  std::string query;
  std::string benchmark;
  std::vector<ImageRef> images;
};

std::vector<RankedInput> read_ranked(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("results not found: " + path.string());
  std::vector<RankedInput> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InputError(path.string() + ":" + std::to_string(n) + ": malformed JSON");
    try {
      RankedInput r{j.at("query_id").get<std::string>(), j.at("query").get<std::string>(), j.value("benchmark", ""), {}};
      for (const auto& item : j.at("results"))
        r.images.push_back({item.at("image_id").get<std::string>(), item.value("source", "")});
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (out.empty()) throw InputError("results file is empty: " + path.string());
  return out;
}

JudgeRun run_judge(const Config& cfg, const std::vector<RankedInput>& inputs, std::ostream& err) {
  const auto judge_model = cfg.str("judge.model");
  if (judge_model.empty()) throw ConfigError("judge.model not configured");
  const auto base_url = cfg.str("judge.base_url");
  if (base_url.empty()) throw ConfigError("judge.base_url not configured");
  auto question_url = cfg.str("judge.question_base_url");
  if (question_url.empty()) question_url = base_url;
  auto question_model = cfg.str("judge.question_model");
  if (question_model.empty()) question_model = judge_model;

  const std::chrono::seconds timeout(cfg.count("judge.timeout_seconds"));
  const auto concurrency = cfg.count("judge.concurrency");
  const double rps = cfg.num("judge.requests_per_second");
  if (rps < 0) throw ConfigError("judge.requests_per_second must be >= 0");
  const auto temperature = cfg.num("judge.temperature");

  RetryPolicy policy;
  policy.max_transport_attempts = static_cast<int>(cfg.count("judge.max_transport_attempts"));
  policy.max_format_attempts = static_cast<int>(cfg.count("judge.max_format_attempts"));
  policy.base_delay = std::chrono::milliseconds(cfg.count("judge.base_delay_ms", 0));

  const fs::path cache_dir = cfg.str("cache_dir");
  fs::create_directories(cache_dir);
  QuestionCache questions(cache_dir / "questions.jsonl");
  VerdictCache verdicts(cache_dir / "verdicts.jsonl");

  HttpChatClient judge_http({base_url, api_key_from_env(), timeout});
  HttpChatClient question_http({question_url, api_key_from_env(), timeout});
  LimitedChatClient judge_client(judge_http, concurrency, rps);
  LimitedChatClient question_client(question_http, concurrency, rps);

  JudgeOptions options;
  options.judge_model = judge_model;
  options.retry = policy;
  options.concurrency = concurrency;
  options.k = cfg.count("judge.k");
  options.temperature = temperature;
  Judge judge(judge_client, options, &verdicts);

  const fs::path image_root = cfg.str("image_root");
  auto resolve = [&](ImageRef ref) {
    const bool remote = ref.source.starts_with("http://") || ref.source.starts_with("https://");
    if (!remote && !ref.source.empty() && !image_root.empty() && fs::path(ref.source).is_relative())
      ref.source = (image_root / ref.source).string();
    return ref;
  };

  JudgeRun run;
  std::map<std::string, std::vector<JudgeVerdict>> by_query;
  for (const auto& in : inputs) {
    try {
      if (by_query.contains(in.query_id)) throw InputError("duplicate query_id " + in.query_id);
      if (in.images.size() < options.k)
        throw InputError(in.query_id + ": only " + std::to_string(in.images.size()) + " ranked images, need " +
                         std::to_string(options.k));
      std::vector<ImageRef> top;
      for (std::size_t i = 0; i < options.k; ++i) top.push_back(resolve(in.images[i]));
      const auto qs = generate_questions(in.query, question_client, question_model, &questions, policy, options.sleep);
      auto v = judge.evaluate_case(in.query_id, top, qs);
      run.verdicts.insert(run.verdicts.end(), v.begin(), v.end());
      by_query[in.query_id] = std::move(v);
    } catch (const Error& e) {
      err << "judge: query " << in.query_id << " failed: " << e.what() << "\n";
      run.report.failed_queries.push_back(in.query_id);
    }
  }
  run.report = [&] {
    auto failed = std::move(run.report.failed_queries);
    auto r = compute_metrics(by_query, options.k);
    r.failed_queries = std::move(failed);
    return r;
  }();
  run.report.judge_model = judge_model;
  run.report.benchmark = inputs.front().benchmark;
  run.report.incomplete = !run.report.failed_queries.empty();
  return run;
}

json report_json(const MetricReport& r) { return json::parse(report_to_json(r)); }

// ---------------------------------------------------------------------------
// Commands

int cmd_probe(const Config& cfg, std::ostream& out, std::ostream& err) {
  const auto pairs_path = cfg.existing("pairs", "caption pairs");
  auto enc = load_encoder(cfg);
  const auto pairs = read_caption_pairs(pairs_path);
  ProbeOptions opts;
  opts.inverse_regularization = cfg.num("probe.inverse_regularization");
  opts.max_iterations = static_cast<int>(cfg.count("probe.max_iterations"));
  opts.gradient_tolerance = cfg.num("probe.gradient_tolerance");
  const auto seed = cfg.seed();
  const auto sweep = layer_sweep(pairs, enc.tokenizer, enc.weights, cfg.num("split_ratio"), seed, opts,
                                 cfg.count("threads"));

  const auto dir = cfg.output_dir();
  const auto prov = provenance(cfg, std::nullopt, &enc.weights);
  DirectionProvenance dprov{sweep.dataset.dataset_hash, seed,           sweep.dataset.split_ratio,
                            enc.weights.identity,       opts.inverse_regularization, opts.max_iterations};
  save_probes(sweep.probes, dprov, dir / "probes.safetensors", annotations(prov));

  json layers = json::array();
  Series test{"test accuracy", {}, {}}, train{"train accuracy", {}, {}};
  out << "layer  train    test     iters  converged\n";
  for (const auto& p : sweep.probes) {
    layers.push_back({{"layer", p.layer},
                      {"train_accuracy", p.train_accuracy},
                      {"test_accuracy", p.test_accuracy},
                      {"iterations", p.iterations_used},
                      {"converged", p.converged},
                      {"error", p.error}});
    char buf[128];
    std::snprintf(buf, sizeof buf, "%5d  %.4f   %.4f   %5d  %s%s\n", p.layer, p.train_accuracy, p.test_accuracy,
                  p.iterations_used, p.converged ? "yes" : "no", p.ok() ? "" : ("  error: " + p.error).c_str());
    out << buf;
    if (p.ok()) {
      test.x.push_back(p.layer);
      test.y.push_back(p.test_accuracy);
      train.x.push_back(p.layer);
      train.y.push_back(p.train_accuracy);
    }
  }
  const json dataset = {{"dataset_hash", sweep.dataset.dataset_hash},
                        {"train_pairs", sweep.dataset.train_pairs},
                        {"test_pairs", sweep.dataset.test_pairs},
                        {"train_captions", sweep.dataset.train.size()},
                        {"test_captions", sweep.dataset.test.size()},
                        {"split_ratio", sweep.dataset.split_ratio},
                        {"seed", sweep.dataset.seed}};
  write_json_artifact(dir / "layer_accuracy.json", {{"layers", layers}, {"dataset", dataset}}, prov);
  write_text(dir / "layer_accuracy.svg",
             svg_line_chart({"Probe accuracy by layer", "layer", "accuracy"}, {test, train}));
  write_sidecar(dir / "layer_accuracy.svg", prov);

  try {
    const auto direction = extract_direction(sweep.probes, enc.weights.config.num_layers, dprov);
    save_direction(direction, dir / "direction.safetensors", annotations(prov));
  } catch (const TrainingError& e) {
    err << "probe: no direction written: " << e.what() << "\n";
    return kIncomplete;
  }
  out << "wrote " << (dir / "direction.safetensors").string() << "\n";
  return kSuccess;
}

int cmd_direction_export(const Config& cfg, std::ostream& out) {
  const auto probes_path = cfg.existing("probes", "probes");
  DirectionProvenance dprov;
  const auto probes = load_probes(probes_path, &dprov);
  const auto direction = extract_direction(probes, static_cast<int>(probes.size()), dprov);
  const auto dir = cfg.output_dir();
  json prov = provenance(cfg);
  prov["encoder_identity"] = dprov.encoder_identity;
  prov["probes_sha256"] = sha256_file(probes_path);
  save_direction(direction, dir / "direction.safetensors", annotations(prov));
  out << "wrote " << (dir / "direction.safetensors").string() << " (" << direction.num_layers() << " layers, width "
      << direction.hidden_width() << ")\n";
  return kSuccess;
}

int cmd_embed_texts(const Config& cfg, std::ostream& out) {
  const auto texts_path = cfg.existing("texts", "texts");
  auto enc = load_encoder(cfg);
  const auto steering = cfg.steering();
  const auto direction = load_direction_if(cfg, steering);
  QueryEmbedder embedder(enc.tokenizer, enc.weights, direction ? &*direction : nullptr, steering, cfg.lexicon());

  std::ifstream in(texts_path);
  std::vector<json> lines;
  std::string text;
  while (std::getline(in, text)) {
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    const auto e = embedder.embed(text);
    lines.push_back({{"text", text}, {"steered", embedder.should_steer(text)}, {"vector", e.vector}});
  }
  if (lines.empty()) throw InputError("texts file is empty: " + texts_path.string());
  const auto dir = cfg.output_dir();
  write_jsonl_artifact(dir / "embeddings.jsonl", lines, provenance(cfg, direction_path(cfg), &enc.weights));
  out << "embedded " << lines.size() << " texts -> " << (dir / "embeddings.jsonl").string() << "\n";
  return kSuccess;
}

int cmd_ingest_index(const Config& cfg, std::ostream& out) {
  const auto records_path = cfg.existing("records", "embedding records");
  const auto records = records_path.extension() == ".jsonl" ? read_embedding_records(records_path)
                                                            : read_embedding_container(records_path);
  if (records.empty()) throw InputError("no embedding records in " + records_path.string());
  auto index = ingest(records);
  index.freeze();
  const auto dir = cfg.output_dir();
  auto prov = provenance(cfg);
  prov["records_sha256"] = sha256_file(records_path);
  index.save(dir / "index.safetensors", annotations(prov));
  out << "indexed " << index.size() << " records (dim " << index.dimension() << ", hash " << index.content_hash()
      << ") -> " << (dir / "index.safetensors").string() << "\n";
  return kSuccess;
}

int cmd_retrieve(const Config& cfg, const std::optional<std::string>& query, std::ostream& out) {
  auto enc = load_encoder(cfg);
  const auto index = EmbeddingIndex::load(cfg.existing("index", "index"));
  if (index.dimension() != static_cast<std::size_t>(enc.weights.config.embed_dim))
    throw InputError("index dimension " + std::to_string(index.dimension()) + " does not match encoder embed_dim " +
                     std::to_string(enc.weights.config.embed_dim));
  const auto steering = cfg.steering();
  const auto direction = load_direction_if(cfg, steering);
  QueryEmbedder embedder(enc.tokenizer, enc.weights, direction ? &*direction : nullptr, steering, cfg.lexicon());

  std::vector<Query> queries;
  std::vector<BenchmarkCase> cases;
  if (query) {
    if (query->empty()) throw InputError("query must be non-empty");
    queries.push_back({"query", *query, {}, ""});
  } else {
    cases = load_cases(cfg);
    check_positives(index, cases);
    queries = queries_from_cases(cases);
  }
  const auto k = cfg.count("k");
  const auto results = retrieve_all(queries, embedder, index, k);

  std::vector<json> lines;
  for (const auto& r : results) {
    lines.push_back(ranked_line(r));
    out << r.query.id << "\t" << (r.steered ? "steered" : "unsteered") << "\t" << r.query.text << "\n";
    for (std::size_t i = 0; i < r.ranked.items.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", r.ranked.items[i].score);
      out << "  " << (i + 1) << "\t" << r.ranked.items[i].image_id << "\t" << buf << "\n";
    }
  }
  if (!cases.empty()) {
    std::vector<RankedResult> ranked;
    for (const auto& r : results) ranked.push_back(r.ranked);
    for (const std::size_t at : {1, 5, 10}) {
      if (at > k) break;
      char buf[64];
      std::snprintf(buf, sizeof buf, "Recall@%zu = %.4f\n", at, mean_recall_at_k(ranked, cases, at));
      out << buf;
    }
  }
  const auto dir = cfg.output_dir();
  write_jsonl_artifact(dir / "ranked.jsonl", lines, provenance(cfg, direction_path(cfg), &enc.weights));
  return kSuccess;
}

int cmd_judge(const Config& cfg, std::ostream& out, std::ostream& err) {
  const auto results_path = cfg.existing("results", "results");
  const auto inputs = read_ranked(results_path);
  auto run = run_judge(cfg, inputs, err);

  const auto dir = cfg.output_dir();
  auto prov = provenance(cfg);
  prov["results_sha256"] = sha256_file(results_path);
  std::vector<json> lines;
  for (auto v : run.verdicts) {
    const auto j = json::parse(verdict_to_json(v));
    lines.push_back(j);
  }
  write_jsonl_artifact(dir / "verdicts.jsonl", lines, prov);
  write_json_artifact(dir / "report.json", report_json(run.report), prov);
  out << format_report_table(run.report);
  if (run.report.incomplete) {
    out << "failed queries:";
    for (const auto& q : run.report.failed_queries) out << " " << q;
    out << "\n";
    return kIncomplete;
  }
  return kSuccess;
}

int cmd_ablate_alpha(const Config& cfg, std::ostream& out, std::ostream& err) {
  const auto grid = parse_alpha_grid(cfg.str("ablation.grid"));
  const auto mode = cfg.str("ablation.mode");
  if (mode != "recall" && mode != "judged") throw ConfigError("ablation.mode must be recall or judged");
  auto enc = load_encoder(cfg);
  const auto index = EmbeddingIndex::load(cfg.existing("index", "index"));
  const auto cases = load_cases(cfg);
  check_positives(index, cases);
  const auto base = cfg.steering();
  const auto direction_file = cfg.existing("direction", "direction");
  const auto direction = load_direction(direction_file);
  const auto lexicon = cfg.lexicon();
  const auto queries = queries_from_cases(cases);
  const auto k = mode == "judged" ? cfg.count("judge.k") : cfg.count("k");

  json rows = json::array();
  Series curve{mode == "judged" ? "judged Top-1 (retrieval+negation)" : "Recall@1", {}, {}};
  bool incomplete = false;
  out << "alpha    " << (mode == "judged" ? "top1_r   top1_rn" : "R@1      R@5      R@10") << "\n";
  for (const double alpha : grid) {
    auto steering = base;
    steering.alpha = alpha;
    QueryEmbedder embedder(enc.tokenizer, enc.weights, &direction, steering, lexicon);
    const auto results = retrieve_all(queries, embedder, index, k);
    json row = {{"alpha", alpha}};
    char buf[128];
    if (mode == "recall") {
      std::vector<RankedResult> ranked;
      for (const auto& r : results) ranked.push_back(r.ranked);
      json recall = json::object();
      std::string line;
      for (const std::size_t at : {1, 5, 10}) {
        if (at > k) continue;
        const double v = mean_recall_at_k(ranked, cases, at);
        recall["R@" + std::to_string(at)] = v;
        std::snprintf(buf, sizeof buf, "%-8.4f ", v);
        line += buf;
      }
      row["recall"] = recall;
      curve.x.push_back(alpha);
      curve.y.push_back(recall["R@1"].get<double>());
      std::snprintf(buf, sizeof buf, "%-8.4f ", alpha);
      out << buf << line << "\n";
    } else {
      std::vector<RankedInput> inputs;
      for (const auto& r : results) {
        RankedInput in{r.query.id, r.query.text, r.query.benchmark, {}};
        for (const auto& s : r.ranked.items) in.images.push_back({s.image_id, s.source});
        inputs.push_back(std::move(in));
      }
      const auto run = run_judge(cfg, inputs, err);
      row["report"] = report_json(run.report);
      incomplete = incomplete || run.report.incomplete;
      curve.x.push_back(alpha);
      curve.y.push_back(run.report.retrieval_and_negation.top1);
      std::snprintf(buf, sizeof buf, "%-8.4f %-8.4f %-8.4f\n", alpha, run.report.retrieval.top1,
                    run.report.retrieval_and_negation.top1);
      out << buf;
    }
    rows.push_back(row);
  }
  const auto dir = cfg.output_dir();
  const auto prov = provenance(cfg, direction_file, &enc.weights);
  write_json_artifact(dir / "ablation.json", {{"mode", mode}, {"k", k}, {"rows", rows}, {"incomplete", incomplete}},
                      prov);
  write_text(dir / "ablation.svg", svg_line_chart({"Steering strength ablation", "alpha", curve.label}, {curve}));
  write_sidecar(dir / "ablation.svg", prov);
  return incomplete ? kIncomplete : kSuccess;
}

int cmd_pca_plot(const Config& cfg, std::ostream& out) {
  const auto pairs = read_caption_pairs(cfg.existing("pairs", "caption pairs"));
  if (pairs.size() < 4) throw InputError("PCA plot needs at least 4 caption pairs, got " + std::to_string(pairs.size()));
  auto enc = load_encoder(cfg);
  const auto direction_file = cfg.existing("direction", "direction");
  const auto direction = load_direction(direction_file);
  auto steering = cfg.steering();
  steering.enabled = true;
  steering.gating = Gating::Always;
  QueryEmbedder plain(enc.tokenizer, enc.weights, nullptr, [&] {
    auto s = steering;
    s.enabled = false;
    return s;
  }());
  QueryEmbedder steered(enc.tokenizer, enc.weights, &direction, steering);

  const auto n = static_cast<Eigen::Index>(pairs.size());
  const auto e = enc.weights.config.embed_dim;
  Eigen::MatrixXd pooled(3 * n, e);
  auto put = [&](Eigen::Index row, const TextEmbedding& t) {
    for (int c = 0; c < e; ++c) pooled(row, c) = t.vector[static_cast<std::size_t>(c)];
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    put(i, plain.embed(p.original));
    put(n + i, plain.embed(p.negated));
    put(2 * n + i, steered.embed(p.negated));
  }
  const auto pca = fit_pca(pooled, 3);

  const char* groups[] = {"original", "negated", "negated+steered"};
  json points = json::array();
  std::vector<Series> scatter;
  for (int g = 0; g < 3; ++g) {
    Series s{groups[g], {}, {}};
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = g * n + i;
      const auto& p = pairs[static_cast<std::size_t>(i)];
      points.push_back({{"group", groups[g]},
                        {"pair_index", i},
                        {"text", g == 0 ? p.original : p.negated},
                        {"pc", {pca.projections(row, 0), pca.projections(row, 1), pca.projections(row, 2)}}});
      s.x.push_back(pca.projections(row, 0));
      s.y.push_back(pca.projections(row, 1));
    }
    scatter.push_back(std::move(s));
  }
  const std::vector<double> variance(pca.explained_variance.data(), pca.explained_variance.data() + 3);
  const auto dir = cfg.output_dir();
  const auto prov = provenance(cfg, direction_file, &enc.weights);
  write_json_artifact(dir / "pca.json",
                      {{"samples", 3 * n},
                       {"explained_variance", variance},
                       {"total_variance", pca.total_variance},
                       {"points", points}},
                      prov);
  write_text(dir / "pca.svg", svg_scatter({"Text embeddings, first two principal components", "PC1", "PC2"}, scatter));
  write_sidecar(dir / "pca.svg", prov);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld points; explained variance %.6g %.6g %.6g of %.6g\n",
                static_cast<long long>(3 * n), variance[0], variance[1], variance[2], pca.total_variance);
  out << buf;
  return kSuccess;
}

// Returns an empty string when the artifact verifies.
std::string verify_one(const fs::path& path) {
  if (!fs::exists(path)) return "not found";
  const auto side = sidecar_path(path);
  if (fs::exists(side)) {
    std::ifstream in(side);
    const auto doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.contains("container_sha256")) return "sidecar lacks container_sha256";
    if (doc["container_sha256"] != sha256_file(path)) return "content hash mismatch";
    const auto format = doc.value("format", "");
    try {
      if (format == "negsteer.direction/1") load_direction(path);
      if (format == "negsteer.probes/1") load_probes(path);
      if (format == "negsteer.index/1") EmbeddingIndex::load(path);
    } catch (const Error& e) {
      return e.what();
    }
    return "";
  }
  std::ifstream in(path);
  const auto doc = json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("content_sha256")) return "no provenance record";
  if (doc["content_sha256"] != content_hash(doc)) return "content hash mismatch";
  return "";
}

int cmd_verify(const std::vector<std::string>& paths, std::ostream& out) {
  if (paths.empty()) throw InputError("verify needs at least one artifact path");
  bool ok = true;
  for (const auto& p : paths) {
    const auto problem = verify_one(p);
    if (problem.empty()) {
      out << "OK   " << p << "\n";
    } else {
      out << "FAIL " << p << ": " << problem << "\n";
      ok = false;
    }
  }
  return ok ? kSuccess : kUsageError;
}

}  // namespace

std::string default_config_json() { return defaults().dump(2); }

std::vector<double> parse_alpha_grid(const std::string& spec) {
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw ConfigError("malformed alpha grid: " + spec);
    }
    if (used != s.size()) throw ConfigError("malformed alpha grid: " + spec);
    return v;
  };
  std::vector<double> values;
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.size() != 3) throw ConfigError("alpha grid range must be start:stop:step");
    const double a = number(parts[0]), b = number(parts[1]), step = number(parts[2]);
    if (!(step > 0)) throw ConfigError("alpha grid step must be positive");
    if (b < a) throw ConfigError("alpha grid stop is below start");
    const auto n = static_cast<long>(std::floor((b - a) / step + 1e-9));
    for (long i = 0; i <= n; ++i) values.push_back(a + static_cast<double>(i) * step);
  } else {
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ',')) values.push_back(number(part));
  }
  if (values.empty()) throw ConfigError("alpha grid is empty");
  for (const double v : values)
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("alpha grid value outside [0, 1]: " + std::to_string(v));
  return values;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"negsteer: negation steering for contrastive text encoders", "negsteer"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;
  app.add_option("--config", config_file, "JSON run configuration");
  app.add_option("--set", sets, "Override a config key: key.path=value (value parsed as JSON when possible)");
  const std::vector<std::pair<std::string, std::string>> sugar = {
      {"--weights", "weights"},       {"--vocab", "vocab"},         {"--merges", "merges"},
      {"--pairs", "pairs"},           {"--texts", "texts"},         {"--records", "records"},
      {"--probes", "probes"},         {"--direction", "direction"}, {"--index", "index"},
      {"--benchmark", "benchmark"},   {"--results", "results"},     {"--image-root", "image_root"},
      {"--cache-dir", "cache_dir"},   {"--out", "output_dir"},      {"--seed", "seed"},
      {"--threads", "threads"},       {"--k", "k"},                 {"--alpha", "steering.alpha"},
      {"--gating", "steering.gating"}, {"--positions", "steering.positions"}, {"--judge-url", "judge.base_url"},
      {"--judge-model", "judge.model"}, {"--grid", "ablation.grid"}, {"--mode", "ablation.mode"},
  };
  for (const auto& [flag, key] : sugar) {
    app.add_option_function<std::string>(
        flag, [&flags, key = key](const std::string& v) { flags[key] = v; }, "config key " + key);
  }

  auto* probe = app.add_subcommand("probe", "Train per-layer probes and export the negation direction");
  auto* export_cmd = app.add_subcommand("direction-export", "Convert saved probe weights into a direction artifact");
  auto* embed = app.add_subcommand("embed-texts", "Embed one text per line, with gated steering");
  auto* ingest_cmd = app.add_subcommand("ingest-index", "Build a frozen retrieval index from embedding records");
  auto* retrieve = app.add_subcommand("retrieve", "Top-k retrieval for a query or a benchmark file");
  std::optional<std::string> query;
  std::optional<std::string> steer;
  retrieve->add_option("--query", query, "Ad hoc query text");
  retrieve->add_option("--steer", steer, "Request steering (always|on) or disable it (never|off); gating still applies");
  auto* judge = app.add_subcommand("judge", "Judge ranked results and report Top-1 / Avg / Top-k");
  auto* ablate = app.add_subcommand("ablate-alpha", "Sweep the steering strength");
  auto* pca = app.add_subcommand("pca-plot", "Principal-component view of original, negated and steered captions");
  auto* verify = app.add_subcommand("verify", "Re-check artifact hashes");
  std::vector<std::string> verify_paths;
  verify->add_option("paths", verify_paths, "Artifacts to check")->required();
  auto* show = app.add_subcommand("show-config", "Print the effective configuration");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    json doc = defaults();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw InputError("config not found: " + config_file);
      const auto patch = json::parse(in, nullptr, false);
      if (patch.is_discarded()) throw ConfigError("config is not valid JSON: " + config_file);
      overlay(doc, patch);
    }
    for (const auto& [key, value] : flags) set_key(doc, key, parse_override_value(value));
    if (steer) {
      if (*steer == "always" || *steer == "on") {
        set_key(doc, "steering.enabled", true);
      } else if (*steer == "never" || *steer == "off") {
        set_key(doc, "steering.enabled", false);
      } else {
        throw ConfigError("--steer expects always|on|never|off, got " + *steer);
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
      set_key(doc, s.substr(0, eq), parse_override_value(s.substr(eq + 1)));
    }
    for (const auto& key : {"vocab", "merges", "weights", "pairs", "texts", "records", "probes", "direction",
                            "index", "benchmark", "results", "image_root", "cache_dir", "output_dir"})
      if (!doc[key].is_string()) throw ConfigError(std::string("config key ") + key + " must be a string");
    const Config cfg(std::move(doc));
    cfg.seed();
    err << "config " << cfg.hash() << ": " << cfg.doc().dump() << "\n";

    if (*show) {
      out << cfg.doc().dump(2) << "\n";
      return kSuccess;
    }
    if (*probe) return cmd_probe(cfg, out, err);
    if (*export_cmd) return cmd_direction_export(cfg, out);
    if (*embed) return cmd_embed_texts(cfg, out);
    if (*ingest_cmd) return cmd_ingest_index(cfg, out);
    if (*retrieve) return cmd_retrieve(cfg, query, out);
    if (*judge) return cmd_judge(cfg, out, err);
    if (*ablate) return cmd_ablate_alpha(cfg, out, err);
    if (*pca) return cmd_pca_plot(cfg, out);
    if (*verify) return cmd_verify(verify_paths, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace negsteer::cli
