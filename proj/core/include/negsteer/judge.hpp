#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "negsteer/chat_client.hpp"

namespace negsteer {

enum class Answer { Yes, No, Invalid, NotAsked };

std::string to_string(Answer a);
Answer parse_answer(std::string_view s);

/// Lowercase, strip punctuation, take the first token; yes/no or nullopt.
std::optional<Answer> normalize_judge_reply(std::string_view reply);

/// q_r has ground truth "yes" (scene matches apart from the negated element);
/// q_n has ground truth "no" (the negated element is absent).
struct QuestionPair {
  std::string query;
  std::string retrieval_question;
  std::string negation_question;
  /// Version hash of the generating prompt template.
  std::string prompt_hash;
};

std::string question_prompt(std::string_view negated_query);
std::string question_prompt_hash();
/// Parses {"retrieval_question": ..., "negation_question": ...}, tolerating a
/// surrounding code fence. Both must be non-empty questions ending in '?'.
std::optional<QuestionPair> parse_question_reply(std::string_view query, std::string_view reply);

/// Append-only JSON Lines cache keyed by (prompt hash, query).
class QuestionCache {
 public:
  QuestionCache() = default;
  explicit QuestionCache(std::filesystem::path file);

  std::optional<QuestionPair> get(const std::string& prompt_hash, const std::string& query) const;
  void put(const QuestionPair& pair);

 private:
  std::filesystem::path file_;
  mutable std::mutex mutex_;
  std::map<std::pair<std::string, std::string>, QuestionPair> entries_;
};

/// Throws InputError for an empty query and GenerationError when every
/// attempt produced a malformed reply.
QuestionPair generate_questions(std::string_view negated_query, ChatClient& client, const std::string& model,
                                QuestionCache* cache = nullptr, const RetryPolicy& policy = {},
                                const Sleeper& sleep = default_sleeper());

struct ImageRef {
  std::string image_id;
  /// Local file path or http(s) URL.
  std::string source;
};

struct JudgeVerdict {
  std::string query_id;
  std::string image_id;
  int rank = 0;
  Answer answer_r = Answer::Invalid;
  Answer answer_n = Answer::NotAsked;
  std::string judge_model;
  bool cached = false;

  bool retrieval_correct() const { return answer_r == Answer::Yes; }
  bool joint_correct() const { return answer_r == Answer::Yes && answer_n == Answer::No; }
};

std::string verdict_to_json(const JudgeVerdict& v);
JudgeVerdict verdict_from_json(std::string_view line);
std::vector<JudgeVerdict> read_verdicts(const std::filesystem::path& path);

/// Append-only JSON Lines cache keyed by (judge model, image hash, question hash).
class VerdictCache {
 public:
  VerdictCache() = default;
  explicit VerdictCache(std::filesystem::path file);

  std::optional<Answer> get(const std::string& model, const std::string& image_hash,
                            const std::string& question_hash) const;
  void put(const std::string& model, const std::string& image_hash, const std::string& question_hash, Answer a);
  std::size_t size() const;

 private:
  std::filesystem::path file_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, Answer> entries_;
};

struct JudgeOptions {
  std::string judge_model;
  RetryPolicy retry;
  std::size_t concurrency = 4;
  std::size_t k = 5;
  double temperature = 0.0;
  Sleeper sleep = default_sleeper();
};

class Judge {
 public:
  Judge(ChatClient& client, JudgeOptions options, VerdictCache* cache = nullptr);

  struct Outcome {
    Answer answer = Answer::Invalid;
    bool cached = false;
  };

  /// One yes/no question about one image. `expected` is the ground-truth
  /// answer and is only recorded in the prompt bookkeeping, never sent.
  Outcome judge_image(const ImageRef& image, const std::string& question, Answer expected);

  /// Exactly options.k ranked images. q_n is asked only after q_r = yes.
  std::vector<JudgeVerdict> evaluate_case(const std::string& query_id, std::span<const ImageRef> ranked,
                                          const QuestionPair& questions);

  const JudgeOptions& options() const { return options_; }

 private:
  struct Payload {
    std::string url;
    std::string hash;
  };
  Payload load_image(const ImageRef& image) const;

  ChatClient& client_;
  JudgeOptions options_;
  VerdictCache* cache_;
};

struct MetricTriple {
  double top1 = 0.0;
  double avg5 = 0.0;  // mean over the k judged ranks
  double top5 = 0.0;  // any correct among the k judged ranks
};

struct MetricReport {
  std::string benchmark;
  std::string judge_model;
  std::size_t cases = 0;
  std::size_t k = 5;
  MetricTriple retrieval;
  MetricTriple retrieval_and_negation;
  bool incomplete = false;
  std::vector<std::string> failed_queries;
};

/// Per query: indicators per rank, Top-1 = rank 1, Avg = mean, Top-k = any;
/// then the mean over queries. Throws InputError if a query lacks ranks 1..k.
MetricReport compute_metrics(const std::map<std::string, std::vector<JudgeVerdict>>& verdicts_by_query,
                             std::size_t k = 5);

std::string report_to_json(const MetricReport& report);
std::string format_report_table(const MetricReport& report);

/// Prompt text sent with each yes/no judge question.
std::string judge_prompt(std::string_view question);

}  // namespace negsteer
