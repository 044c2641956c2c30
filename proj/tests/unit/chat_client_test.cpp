#include <gtest/gtest.h>

#include <atomic>
#include <json.hpp>
#include <thread>

#include "mock_chat_server.hpp"
#include "negsteer/chat_client.hpp"
#include "negsteer/errors.hpp"
#include "negsteer/parallel.hpp"

using namespace negsteer;
using negsteer::testing::MockChatServer;
using negsteer::testing::MockReply;
using negsteer::testing::MockRequest;

namespace {

class ScriptedClient : public ChatClient {
 public:
  explicit ScriptedClient(std::function<ChatResponse(int)> fn) : fn_(std::move(fn)) {}
  ChatResponse complete(const ChatRequest&) override { return fn_(calls_++); }
  int calls() const { return calls_; }

 private:
  std::function<ChatResponse(int)> fn_;
  std::atomic<int> calls_{0};
};

}  // namespace

TEST(ChatWire, RequestBodyShape) {
  ChatRequest r{"judge-x", "Is there a dog?", "data:image/png;base64,AAAA", 0.0, 8};
  const auto body = nlohmann::json::parse(chat_request_body(r));
  EXPECT_EQ(body["model"], "judge-x");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 8);
  const auto& content = body["messages"][0]["content"];
  EXPECT_EQ(body["messages"][0]["role"], "user");
  EXPECT_EQ(content[0]["type"], "text");
  EXPECT_EQ(content[0]["text"], "Is there a dog?");
  EXPECT_EQ(content[1]["image_url"]["url"], "data:image/png;base64,AAAA");
  r.image_url.clear();
  EXPECT_EQ(nlohmann::json::parse(chat_request_body(r))["messages"][0]["content"].size(), 1u);
}

TEST(ChatWire, ParsesResponse) {
  EXPECT_EQ(parse_chat_response(R"({"choices":[{"message":{"content":"Yes."}}]})"), "Yes.");
  EXPECT_THROW(parse_chat_response("{}"), ApiError);
  EXPECT_THROW(parse_chat_response("not json"), ApiError);
}

TEST(HttpChatClient, RoundTripWithMockServer) {
  MockChatServer server([](const MockRequest& r) { return MockReply{200, "echo:" + r.prompt}; });
  HttpChatClient client({server.base_url(), "secret", std::chrono::seconds(5)});
  const auto res = client.complete({"m", "hello", "", 0.0, 8});
  EXPECT_EQ(res.content, "echo:hello");
  EXPECT_EQ(res.request_id, "mock-1");
  ASSERT_EQ(server.request_count(), 1u);
  EXPECT_EQ(server.requests()[0].authorization, "Bearer secret");
  EXPECT_EQ(server.requests()[0].model, "m");
}

TEST(HttpChatClient, StatusMapping) {
  int status = 503;
  MockChatServer server([&](const MockRequest&) { return MockReply{status, ""}; });
  HttpChatClient client({server.base_url(), "", std::chrono::seconds(5)});
  EXPECT_THROW(client.complete({"m", "x", "", 0, 8}), TransportError);
  status = 429;
  EXPECT_THROW(client.complete({"m", "x", "", 0, 8}), TransportError);
  status = 400;
  try {
    client.complete({"m", "x", "", 0, 8});
    FAIL();
  } catch (const TransportError&) {
    FAIL() << "400 must not be retryable";
  } catch (const ApiError& e) {
    EXPECT_EQ(e.status(), 400);
    EXPECT_FALSE(e.request_id().empty());
  }
}

TEST(HttpChatClient, ConnectionRefusedIsTransportError) {
  HttpChatClient client({"http://127.0.0.1:9/v1", "", std::chrono::seconds(2)});
  EXPECT_THROW(client.complete({"m", "x", "", 0, 8}), TransportError);
  EXPECT_THROW(HttpChatClient({"localhost:80", "", std::chrono::seconds(1)}), ConfigError);
}

TEST(Backoff, ExponentialDelaysThenGivesUp) {
  std::vector<long> delays;
  const Sleeper record = [&](std::chrono::milliseconds d) { delays.push_back(static_cast<long>(d.count())); };
  ScriptedClient always_fail([](int) -> ChatResponse { throw TransportError("down", 503, ""); });
  EXPECT_THROW(complete_with_backoff(always_fail, {}, RetryPolicy{}, record), TransportError);
  EXPECT_EQ(always_fail.calls(), 5);
  EXPECT_EQ(delays, (std::vector<long>{1000, 2000, 4000, 8000}));

  delays.clear();
  ScriptedClient flaky([](int i) -> ChatResponse {
    if (i < 2) throw TransportError("busy", 429, "");
    return {"ok", "r"};
  });
  EXPECT_EQ(complete_with_backoff(flaky, {}, RetryPolicy{}, record).content, "ok");
  EXPECT_EQ(delays, (std::vector<long>{1000, 2000}));

  delays.clear();
  ScriptedClient hard([](int) -> ChatResponse { throw ApiError("bad", 401, ""); });
  EXPECT_THROW(complete_with_backoff(hard, {}, RetryPolicy{}, record), ApiError);
  EXPECT_EQ(hard.calls(), 1);
  EXPECT_TRUE(delays.empty());
}

TEST(LimitedChatClient, BoundsInFlightRequests) {
  std::atomic<int> active{0}, peak{0};
  ScriptedClient slow([&](int) {
    const int now = ++active;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --active;
    return ChatResponse{"yes", ""};
  });
  LimitedChatClient limited(slow, 3);
  parallel_for(40, 12, [&](std::size_t) { limited.complete({}); });
  EXPECT_LE(peak.load(), 3);
  EXPECT_LE(limited.peak_in_flight(), 3u);
  EXPECT_EQ(slow.calls(), 40);
}

TEST(LimitedChatClient, RateLimitSpacesStarts) {
  ScriptedClient fast([](int) { return ChatResponse{"yes", ""}; });
  LimitedChatClient limited(fast, 4, 200.0);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 11; ++i) limited.complete({});
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(ms, 45);
}
