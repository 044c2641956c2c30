#include "negsteer/chat_client.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "negsteer/errors.hpp"

namespace negsteer {

using nlohmann::json;

std::string chat_request_body(const ChatRequest& request) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", request.prompt}});
  if (!request.image_url.empty())
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", request.image_url}}}});
  json body = {{"model", request.model},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens},
               {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
  return body.dump();
}

std::string parse_chat_response(const std::string& body) {
  try {
    const auto j = json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_null()) return {};
    return content.get<std::string>();
  } catch (const json::exception& e) {
    throw ApiError(std::string("malformed chat response: ") + e.what(), 200, "");
  }
}

std::string api_key_from_env() {
  const char* v = std::getenv(kApiKeyEnv);
  return v ? std::string(v) : std::string();
}

HttpChatClient::HttpChatClient(HttpClientConfig config) : config_(std::move(config)) {
  const auto scheme = config_.base_url.find("://");
  if (scheme == std::string::npos) throw ConfigError("judge base_url must include a scheme: " + config_.base_url);
  const auto path_start = config_.base_url.find('/', scheme + 3);
  origin_ = config_.base_url.substr(0, path_start);
  path_ = path_start == std::string::npos ? std::string() : config_.base_url.substr(path_start);
  while (!path_.empty() && path_.back() == '/') path_.pop_back();
  path_ += "/chat/completions";
}

ChatResponse HttpChatClient::complete(const ChatRequest& request) {
  httplib::Client client(origin_);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  auto res = client.Post(path_, headers, chat_request_body(request), "application/json");
  if (!res) throw TransportError("request to " + origin_ + " failed: " + httplib::to_string(res.error()), 0, "");
  const std::string request_id = res->get_header_value("x-request-id");
  if (res->status == 429 || res->status >= 500)
    throw TransportError("server returned " + std::to_string(res->status), res->status, request_id);
  if (res->status != 200)
    throw ApiError("chat endpoint returned " + std::to_string(res->status) + " (request id " +
                       (request_id.empty() ? "n/a" : request_id) + "): " + res->body.substr(0, 200),
                   res->status, request_id);
  return {parse_chat_response(res->body), request_id};
}

Sleeper default_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

ChatResponse complete_with_backoff(ChatClient& client, const ChatRequest& request, const RetryPolicy& policy,
                                   const Sleeper& sleep) {
  for (int attempt = 1;; ++attempt) {
    try {
      return client.complete(request);
    } catch (const TransportError&) {
      if (attempt >= policy.max_transport_attempts) throw;
      const double scale = std::pow(policy.backoff_factor, attempt - 1);
      const auto delay = std::chrono::milliseconds(static_cast<long long>(policy.base_delay.count() * scale));
      if (sleep) sleep(delay);
    }
  }
}

LimitedChatClient::LimitedChatClient(ChatClient& inner, std::size_t max_in_flight, double requests_per_second)
    : inner_(inner), max_in_flight_(std::max<std::size_t>(1, max_in_flight)) {
  if (requests_per_second > 0.0)
    min_interval_ = std::chrono::nanoseconds(static_cast<long long>(1e9 / requests_per_second));
}

ChatResponse LimitedChatClient::complete(const ChatRequest& request) {
  {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return in_flight_ < max_in_flight_; });
    ++in_flight_;
    std::size_t peak = peak_.load();
    while (in_flight_ > peak && !peak_.compare_exchange_weak(peak, in_flight_)) {
    }
    if (min_interval_.count() > 0) {
      const auto now = std::chrono::steady_clock::now();
      const auto start = std::max(now, next_start_);
      next_start_ = start + min_interval_;
      if (start > now) {
        lock.unlock();
        std::this_thread::sleep_until(start);
      }
    }
  }
  struct Release {
    LimitedChatClient* self;
    ~Release() {
      {
        std::lock_guard lock(self->mutex_);
        --self->in_flight_;
      }
      self->cv_.notify_one();
    }
  } release{this};
  return inner_.complete(request);
}

}  // namespace negsteer
