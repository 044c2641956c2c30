#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <string>

namespace negsteer {

/// One single-turn chat-completions request: a text prompt plus an optional image.
struct ChatRequest {
  std::string model;
  std::string prompt;
  /// "data:<mime>;base64,..." or an http(s) URL; empty for text-only requests.
  std::string image_url;
  double temperature = 0.0;
  int max_tokens = 256;
};

struct ChatResponse {
  std::string content;
  std::string request_id;
};

/// Implementations throw TransportError for retryable failures and ApiError
/// for hard ones. Must be safe to call from several threads.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

/// Request body in the chat-completions wire format.
std::string chat_request_body(const ChatRequest& request);
/// Extracts choices[0].message.content; throws ApiError on malformed bodies.
std::string parse_chat_response(const std::string& body);

inline constexpr const char* kApiKeyEnv = "NEGSTEER_API_KEY";
/// Value of NEGSTEER_API_KEY, or empty.
std::string api_key_from_env();

struct HttpClientConfig {
  /// e.g. "http://localhost:8000/v1"; requests go to <base_url>/chat/completions.
  std::string base_url;
  std::string api_key;
  std::chrono::seconds timeout{120};
};

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientConfig config);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  HttpClientConfig config_;
  std::string origin_;
  std::string path_;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;
Sleeper default_sleeper();

struct RetryPolicy {
  /// Transport failures: exponential backoff base * factor^i, at most this many tries.
  int max_transport_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  double backoff_factor = 2.0;
  /// Non-conforming replies (not yes/no, not valid JSON) are re-asked up to this many times in total.
  int max_format_attempts = 3;
};

/// Retries TransportError with exponential backoff; ApiError propagates at once.
ChatResponse complete_with_backoff(ChatClient& client, const ChatRequest& request, const RetryPolicy& policy,
                                   const Sleeper& sleep);

/// Bounds concurrent in-flight requests and, optionally, the request rate.
class LimitedChatClient : public ChatClient {
 public:
  LimitedChatClient(ChatClient& inner, std::size_t max_in_flight, double requests_per_second = 0.0);
  ChatResponse complete(const ChatRequest& request) override;
  std::size_t peak_in_flight() const { return peak_.load(); }

 private:
  ChatClient& inner_;
  std::size_t max_in_flight_;
  std::chrono::nanoseconds min_interval_{0};
  std::mutex mutex_;
  std::condition_variable cv_;
  std::size_t in_flight_ = 0;
  std::atomic<std::size_t> peak_{0};
  std::chrono::steady_clock::time_point next_start_{};
};

}  // namespace negsteer
