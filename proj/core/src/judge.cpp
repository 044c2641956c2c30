#include "negsteer/judge.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "negsteer/errors.hpp"
#include "negsteer/hashing.hpp"
#include "negsteer/parallel.hpp"

namespace negsteer {
namespace {

using nlohmann::json;

constexpr std::string_view kQuestionPrompt = R"(You help evaluate text-to-image retrieval for queries that contain negation.

Query: "{query}"

Write two yes/no questions about an image:
1. "retrieval_question": asks whether the image matches the scene, objects and
   context of the query, ignoring the negated element. Its correct answer for a
   matching image is "yes".
2. "negation_question": asks whether the negated element is present in the
   image. Its correct answer for an image satisfying the query is "no".

Respond with only this JSON object and nothing else:
{"retrieval_question": "...", "negation_question": "..."})";

constexpr std::string_view kJudgeSuffix = "\nAnswer with exactly one word: yes or no.";

std::string mime_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "image/jpeg";
}

void append_line(const std::filesystem::path& file, const std::string& line) {
  if (file.empty()) return;
  std::ofstream out(file, std::ios::app);
  if (!out) throw InputError("cannot append to cache " + file.string());
  out << line << '\n';
}

std::string verdict_key(const std::string& model, const std::string& image_hash, const std::string& question_hash) {
  return model + '\x1f' + image_hash + '\x1f' + question_hash;
}

json triple_json(const MetricTriple& t) { return {{"top1", t.top1}, {"avg5", t.avg5}, {"top5", t.top5}}; }

}  // namespace

std::string to_string(Answer a) {
  switch (a) {
    case Answer::Yes: return "yes";
    case Answer::No: return "no";
    case Answer::Invalid: return "invalid";
    case Answer::NotAsked: return "not-asked";
  }
  return "invalid";
}

Answer parse_answer(std::string_view s) {
  if (s == "yes") return Answer::Yes;
  if (s == "no") return Answer::No;
  if (s == "invalid") return Answer::Invalid;
  if (s == "not-asked") return Answer::NotAsked;
  throw InputError("unknown answer label " + std::string(s));
}

std::optional<Answer> normalize_judge_reply(std::string_view reply) {
  std::string cleaned;
  for (const char c : reply) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    cleaned += static_cast<char>(std::tolower(u));
  }
  const auto start = cleaned.find_first_not_of(" \t\r\n");
  if (start == std::string::npos) return std::nullopt;
  const auto end = cleaned.find_first_of(" \t\r\n", start);
  const auto token = cleaned.substr(start, end == std::string::npos ? std::string::npos : end - start);
  if (token == "yes") return Answer::Yes;
  if (token == "no") return Answer::No;
  return std::nullopt;
}

std::string question_prompt(std::string_view negated_query) {
  std::string p(kQuestionPrompt);
  const auto pos = p.find("{query}");
  p.replace(pos, 7, negated_query);
  return p;
}

std::string question_prompt_hash() { return sha256_hex(kQuestionPrompt).substr(0, 16); }

std::optional<QuestionPair> parse_question_reply(std::string_view query, std::string_view reply) {
  const auto open = reply.find('{');
  const auto close = reply.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) return std::nullopt;
  const auto j = json::parse(reply.substr(open, close - open + 1), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  const auto r = j.find("retrieval_question");
  const auto n = j.find("negation_question");
  if (r == j.end() || n == j.end() || !r->is_string() || !n->is_string()) return std::nullopt;
  QuestionPair q{std::string(query), r->get<std::string>(), n->get<std::string>(), question_prompt_hash()};
  auto valid = [](const std::string& s) {
    const auto end = s.find_last_not_of(" \t\r\n");
    return end != std::string::npos && s[end] == '?' && s.find_first_not_of(" \t?") != std::string::npos;
  };
  if (!valid(q.retrieval_question) || !valid(q.negation_question)) return std::nullopt;
  return q;
}

QuestionCache::QuestionCache(std::filesystem::path file) : file_(std::move(file)) {
  std::ifstream in(file_);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;  // torn trailing line from an interrupted run
    QuestionPair q{j.value("query", ""), j.value("retrieval_question", ""), j.value("negation_question", ""),
                   j.value("prompt_hash", "")};
    entries_[{q.prompt_hash, q.query}] = q;
  }
}

std::optional<QuestionPair> QuestionCache::get(const std::string& prompt_hash, const std::string& query) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find({prompt_hash, query});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void QuestionCache::put(const QuestionPair& pair) {
  std::lock_guard lock(mutex_);
  entries_[{pair.prompt_hash, pair.query}] = pair;
  append_line(file_, json{{"query", pair.query},
                          {"retrieval_question", pair.retrieval_question},
                          {"negation_question", pair.negation_question},
                          {"prompt_hash", pair.prompt_hash}}
                         .dump());
}

QuestionPair generate_questions(std::string_view negated_query, ChatClient& client, const std::string& model,
                                QuestionCache* cache, const RetryPolicy& policy, const Sleeper& sleep) {
  if (negated_query.empty()) throw InputError("query must be non-empty");
  const std::string query(negated_query);
  const auto hash = question_prompt_hash();
  if (cache) {
    if (auto hit = cache->get(hash, query)) return *hit;
  }
  ChatRequest req;
  req.model = model;
  req.prompt = question_prompt(query);
  req.max_tokens = 256;
  for (int attempt = 0; attempt < policy.max_format_attempts; ++attempt) {
    const auto res = complete_with_backoff(client, req, policy, sleep);
    if (auto pair = parse_question_reply(query, res.content)) {
      if (cache) cache->put(*pair);
      return *pair;
    }
  }
  throw GenerationError("question generation for \"" + query + "\" returned malformed output " +
                        std::to_string(policy.max_format_attempts) + " times");
}

std::string verdict_to_json(const JudgeVerdict& v) {
  return json{{"query_id", v.query_id},       {"image_id", v.image_id},   {"rank", v.rank},
              {"answer_r", to_string(v.answer_r)}, {"answer_n", to_string(v.answer_n)},
              {"judge_model", v.judge_model}, {"cached", v.cached}}
      .dump();
}

JudgeVerdict verdict_from_json(std::string_view line) {
  try {
    const auto j = json::parse(line);
    JudgeVerdict v;
    v.query_id = j.at("query_id").get<std::string>();
    v.image_id = j.at("image_id").get<std::string>();
    v.rank = j.at("rank").get<int>();
    v.answer_r = parse_answer(j.at("answer_r").get<std::string>());
    v.answer_n = parse_answer(j.at("answer_n").get<std::string>());
    v.judge_model = j.value("judge_model", "");
    v.cached = j.value("cached", false);
    return v;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed verdict: ") + e.what());
  }
}

std::vector<JudgeVerdict> read_verdicts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("verdict file not found: " + path.string());
  std::vector<JudgeVerdict> out;
  std::string line;
  while (std::getline(in, line))
    if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(verdict_from_json(line));
  return out;
}

VerdictCache::VerdictCache(std::filesystem::path file) : file_(std::move(file)) {
  std::ifstream in(file_);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    try {
      entries_[verdict_key(j.at("model"), j.at("image_hash"), j.at("question_hash"))] =
          parse_answer(j.at("answer").get<std::string>());
    } catch (const std::exception&) {
    }
  }
}

std::optional<Answer> VerdictCache::get(const std::string& model, const std::string& image_hash,
                                        const std::string& question_hash) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(verdict_key(model, image_hash, question_hash));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void VerdictCache::put(const std::string& model, const std::string& image_hash, const std::string& question_hash,
                       Answer a) {
  std::lock_guard lock(mutex_);
  entries_[verdict_key(model, image_hash, question_hash)] = a;
  append_line(file_, json{{"model", model},
                          {"image_hash", image_hash},
                          {"question_hash", question_hash},
                          {"answer", to_string(a)}}
                         .dump());
}

std::size_t VerdictCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::string judge_prompt(std::string_view question) { return std::string(question) + std::string(kJudgeSuffix); }

Judge::Judge(ChatClient& client, JudgeOptions options, VerdictCache* cache)
    : client_(client), options_(std::move(options)), cache_(cache) {
  if (options_.k < 1) throw ConfigError("judge k must be >= 1");
}

Judge::Payload Judge::load_image(const ImageRef& image) const {
  if (image.source.starts_with("http://") || image.source.starts_with("https://"))
    return {image.source, sha256_hex(image.source)};
  if (image.source.empty() || !std::filesystem::is_regular_file(image.source))
    throw InputError("image " + image.image_id + " is not readable: " + image.source);
  const auto bytes = read_file_bytes(image.source);
  return {"data:" + mime_for(image.source) + ";base64," + base64_encode(bytes), sha256_hex(bytes)};
}

Judge::Outcome Judge::judge_image(const ImageRef& image, const std::string& question, Answer /*expected*/) {
  if (question.empty()) throw InputError("judge question must be non-empty");
  const auto payload = load_image(image);
  const auto qhash = sha256_hex(question);
  if (cache_) {
    if (auto hit = cache_->get(options_.judge_model, payload.hash, qhash)) return {*hit, true};
  }
  ChatRequest req;
  req.model = options_.judge_model;
  req.prompt = judge_prompt(question);
  req.image_url = payload.url;
  req.max_tokens = 8;
  req.temperature = options_.temperature;
  Answer answer = Answer::Invalid;
  for (int attempt = 0; attempt < options_.retry.max_format_attempts; ++attempt) {
    const auto res = complete_with_backoff(client_, req, options_.retry, options_.sleep);
    if (auto a = normalize_judge_reply(res.content)) {
      answer = *a;
      break;
    }
  }
  if (cache_) cache_->put(options_.judge_model, payload.hash, qhash, answer);
  return {answer, false};
}

std::vector<JudgeVerdict> Judge::evaluate_case(const std::string& query_id, std::span<const ImageRef> ranked,
                                               const QuestionPair& questions) {
  if (ranked.size() != options_.k)
    throw InputError(query_id + ": expected " + std::to_string(options_.k) + " ranked images, got " +
                     std::to_string(ranked.size()));
  std::vector<JudgeVerdict> out(ranked.size());
  parallel_for(ranked.size(), options_.concurrency, [&](std::size_t i) {
    JudgeVerdict v;
    v.query_id = query_id;
    v.image_id = ranked[i].image_id;
    v.rank = static_cast<int>(i) + 1;
    v.judge_model = options_.judge_model;
    const auto r = judge_image(ranked[i], questions.retrieval_question, Answer::Yes);
    v.answer_r = r.answer;
    v.cached = r.cached;
    v.answer_n = Answer::NotAsked;
    if (r.answer == Answer::Yes) {
      const auto n = judge_image(ranked[i], questions.negation_question, Answer::No);
      v.answer_n = n.answer;
      v.cached = v.cached && n.cached;
    }
    out[i] = std::move(v);
  });
  return out;
}

MetricReport compute_metrics(const std::map<std::string, std::vector<JudgeVerdict>>& verdicts_by_query,
                             std::size_t k) {
  if (k < 1) throw InputError("k must be >= 1");
  MetricReport report;
  report.k = k;
  report.cases = verdicts_by_query.size();
  if (verdicts_by_query.empty()) return report;
  for (const auto& [qid, verdicts] : verdicts_by_query) {
    std::vector<const JudgeVerdict*> by_rank(k, nullptr);
    for (const auto& v : verdicts)
      if (v.rank >= 1 && static_cast<std::size_t>(v.rank) <= k) by_rank[static_cast<std::size_t>(v.rank - 1)] = &v;
    for (std::size_t r = 0; r < k; ++r)
      if (!by_rank[r]) throw InputError(qid + ": missing verdict for rank " + std::to_string(r + 1));
    if (report.judge_model.empty()) report.judge_model = by_rank[0]->judge_model;

    auto accumulate = [&](MetricTriple& t, auto correct) {
      double sum = 0.0;
      bool any = false;
      for (const auto* v : by_rank) {
        const bool c = correct(*v);
        sum += c ? 1.0 : 0.0;
        any = any || c;
      }
      t.top1 += correct(*by_rank[0]) ? 1.0 : 0.0;
      t.avg5 += sum / static_cast<double>(k);
      t.top5 += any ? 1.0 : 0.0;
    };
    accumulate(report.retrieval, [](const JudgeVerdict& v) { return v.retrieval_correct(); });
    accumulate(report.retrieval_and_negation, [](const JudgeVerdict& v) { return v.joint_correct(); });
  }
  const auto n = static_cast<double>(verdicts_by_query.size());
  for (auto* t : {&report.retrieval, &report.retrieval_and_negation}) {
    t->top1 /= n;
    t->avg5 /= n;
    t->top5 /= n;
  }
  return report;
}

std::string report_to_json(const MetricReport& r) {
  return json{{"benchmark", r.benchmark},
              {"judge_model", r.judge_model},
              {"cases", r.cases},
              {"k", r.k},
              {"retrieval", triple_json(r.retrieval)},
              {"retrieval_and_negation", triple_json(r.retrieval_and_negation)},
              {"incomplete", r.incomplete},
              {"failed_queries", r.failed_queries}}
      .dump(2);
}

std::string format_report_table(const MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "benchmark: %s  judge: %s  cases: %zu  k: %zu%s\n"
                "%-24s %7s %7s %7s\n"
                "%-24s %7.3f %7.3f %7.3f\n"
                "%-24s %7.3f %7.3f %7.3f\n",
                r.benchmark.empty() ? "-" : r.benchmark.c_str(), r.judge_model.empty() ? "-" : r.judge_model.c_str(),
                r.cases, r.k, r.incomplete ? "  [INCOMPLETE]" : "", "", "Top-1", "Avg", "Top-k", "retrieval",
                r.retrieval.top1, r.retrieval.avg5, r.retrieval.top5, "retrieval+negation",
                r.retrieval_and_negation.top1, r.retrieval_and_negation.avg5, r.retrieval_and_negation.top5);
  return buf;
}

}  // namespace negsteer
