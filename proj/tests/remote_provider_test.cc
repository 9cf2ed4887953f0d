#include "prefixprobe/remote_provider.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <unordered_set>

#include "prefixprobe/scoring.hpp"
#include "prefixprobe/synthetic.hpp"
#include "prefixprobe/toy_model.hpp"

namespace prefixprobe {
namespace {

using Handler = std::function<void(const nlohmann::json&, httplib::Response&)>;

// Local HTTP server running a caller-supplied handler for the logprob route.
class MockServer {
 public:
  explicit MockServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/logprobs", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mutex_);
        last_request_ = nlohmann::json::parse(req.body);
        last_auth_ = req.get_header_value("Authorization");
      }
      ++requests_;
      handler_(nlohmann::json::parse(req.body), res);
    });
    server_.Post("/tokenize", [this](const httplib::Request& req, httplib::Response& res) {
      if (tokenize_) tokenize_(nlohmann::json::parse(req.body), res);
    });
    server_.Post("/detokenize", [this](const httplib::Request& req, httplib::Response& res) {
      if (detokenize_) detokenize_(nlohmann::json::parse(req.body), res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const { return requests_.load(); }
  nlohmann::json last_request() {
    std::lock_guard lock(mutex_);
    return last_request_;
  }
  std::string last_auth() {
    std::lock_guard lock(mutex_);
    return last_auth_;
  }
  Handler tokenize_, detokenize_;

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> requests_{0};
  std::mutex mutex_;
  nlohmann::json last_request_;
  std::string last_auth_;
};

void reply(httplib::Response& res, const nlohmann::json& body) {
  res.set_content(body.dump(), "application/json");
}

RemoteOptions fast_retries() {
  RemoteOptions o;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.timeout_seconds = 5;
  return o;
}

TEST(RemoteProvider, PassesThroughEchoedLogprobs) {
  MockServer server([](const nlohmann::json& req, httplib::Response& res) {
    auto ids = req["append_token_ids"].get<TokenSeq>();
    TokenSeq all = {101, 102, 103};
    all.insert(all.end(), ids.begin(), ids.end());
    nlohmann::json lps = {nullptr, -1.0, -2.0};
    for (std::size_t i = 0; i < ids.size(); ++i) lps.push_back(-0.25 * double(i + 1));
    reply(res, {{"token_ids", all}, {"token_logprobs", lps}, {"cached", false}});
  });
  RemoteProvider p(server.url(), "mock-model", fast_retries());
  const auto r = prefix_logprobs(p, {"hello", {7, 8, 9}, CacheHint::kReuse});
  EXPECT_EQ(r.per_token, (std::vector<double>{-0.25, -0.5, -0.75}));
  EXPECT_EQ(r.prompt_token_count, 3u);
  const auto req = server.last_request();
  EXPECT_EQ(req["model"], "mock-model");
  EXPECT_EQ(req["prompt"], "hello");
  EXPECT_EQ(req["echo_logprobs"], true);
  EXPECT_EQ(req["cache"], "reuse");
  EXPECT_EQ(req["template"], "raw");
}

TEST(RemoteProvider, MissingLogprobsIsAnError) {
  MockServer server([](const nlohmann::json& req, httplib::Response& res) {
    reply(res, {{"token_ids", req["append_token_ids"]}});
  });
  RemoteProvider p(server.url(), "m", fast_retries());
  try {
    p.logprobs({"x", {1, 2}, CacheHint::kReuse});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("missing log-probabilities"), std::string::npos);
  }
}

TEST(RemoteProvider, NullLogprobInsidePrefixIsAnError) {
  MockServer server([](const nlohmann::json& req, httplib::Response& res) {
    reply(res, {{"token_ids", req["append_token_ids"]},
                {"token_logprobs", {-1.0, nullptr}}});
  });
  RemoteProvider p(server.url(), "m", fast_retries());
  EXPECT_THROW(p.logprobs({"x", {1, 2}, CacheHint::kReuse}), BackendError);
}

TEST(RemoteProvider, MisalignedTokenizationIsAnError) {
  MockServer server([](const nlohmann::json&, httplib::Response& res) {
    // The server re-segmented the appended tokens.
    reply(res, {{"token_ids", {5, 6, 77}}, {"token_logprobs", {nullptr, -1.0, -1.0}}});
  });
  RemoteProvider p(server.url(), "m", fast_retries());
  try {
    p.logprobs({"x", {6, 7}, CacheHint::kReuse});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("align"), std::string::npos);
  }
}

TEST(RemoteProvider, RetriesServerErrorsThenSucceeds) {
  std::atomic<int> calls{0};
  MockServer server([&](const nlohmann::json& req, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    reply(res, {{"token_ids", req["append_token_ids"]}, {"token_logprobs", {-0.5}}});
  });
  RemoteProvider p(server.url(), "m", fast_retries());
  EXPECT_EQ(p.logprobs({"x", {4}, CacheHint::kReuse}).per_token[0], -0.5);
  EXPECT_EQ(calls.load(), 3);
}

TEST(RemoteProvider, GivesUpAfterRetryBudget) {
  MockServer server([](const nlohmann::json&, httplib::Response& res) { res.status = 500; });
  RemoteProvider p(server.url(), "m", fast_retries());
  EXPECT_THROW(p.logprobs({"x", {4}, CacheHint::kReuse}), TransportError);
  EXPECT_EQ(server.requests(), 3);
}

TEST(RemoteProvider, ClientErrorsAreNotRetried) {
  MockServer server([](const nlohmann::json&, httplib::Response& res) { res.status = 400; });
  RemoteProvider p(server.url(), "m", fast_retries());
  EXPECT_THROW(p.logprobs({"x", {4}, CacheHint::kReuse}), BackendError);
  EXPECT_EQ(server.requests(), 1);
}

TEST(RemoteProvider, UnreachableEndpoint) {
  auto opts = fast_retries();
  opts.timeout_seconds = 0.5;
  RemoteProvider p("http://127.0.0.1:1", "m", opts);
  EXPECT_THROW(p.logprobs({"x", {4}, CacheHint::kReuse}), TransportError);
  // Later probes fail without another round of retries.
  const auto start = std::chrono::steady_clock::now();
  try {
    p.logprobs({"y", {4}, CacheHint::kReuse});
    FAIL() << "expected TransportError";
  } catch (const TransportError& e) {
    EXPECT_NE(std::string(e.what()).find("marked unreachable"), std::string::npos);
  }
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::milliseconds(50));
}

TEST(RemoteProvider, ServerErrorsDoNotTripTheBreaker) {
  std::atomic<int> calls{0};
  MockServer server([&](const nlohmann::json& req, httplib::Response& res) {
    if (calls++ < 3) {
      res.status = 503;
      return;
    }
    reply(res, {{"token_ids", req["append_token_ids"]}, {"token_logprobs", {-0.5}}});
  });
  RemoteProvider p(server.url(), "m", fast_retries());
  EXPECT_THROW(p.logprobs({"x", {4}, CacheHint::kReuse}), TransportError);
  EXPECT_EQ(p.logprobs({"x", {4}, CacheHint::kReuse}).per_token[0], -0.5);
}

TEST(RemoteProvider, SendsAuthTokenAndTemplateMode) {
  ::setenv(kAuthTokenEnv, "secret-token", 1);
  MockServer server([](const nlohmann::json& req, httplib::Response& res) {
    reply(res, {{"token_ids", req["append_token_ids"]}, {"token_logprobs", {-0.5}}});
  });
  auto p = remote_provider(server.url(), "m", TemplateMode::kChat, fast_retries());
  p->logprobs({"x", {4}, CacheHint::kBypass});
  ::unsetenv(kAuthTokenEnv);
  EXPECT_EQ(server.last_auth(), "Bearer secret-token");
  EXPECT_EQ(server.last_request()["template"], "chat");
  EXPECT_EQ(server.last_request()["cache"], "bypass");
}

TEST(RemoteProvider, NextTokenLogprobsAndTokenizer) {
  MockServer server([](const nlohmann::json& req, httplib::Response& res) {
    EXPECT_GT(req["top_logprobs"].get<int>(), 0);
    reply(res, {{"token_ids", req["append_token_ids"]},
                {"token_logprobs", nlohmann::json::array()},
                {"next_top_logprobs",
                 {{{"token_id", 3}, {"logprob", -0.1}}, {{"token_id", 9}, {"logprob", -2.5}}}}});
  });
  server.tokenize_ = [](const nlohmann::json& req, httplib::Response& res) {
    reply(res, {{"token_ids", TokenSeq(req["text"].get<std::string>().size(), 1)}});
  };
  server.detokenize_ = [](const nlohmann::json& req, httplib::Response& res) {
    reply(res, {{"text", " x" + std::to_string(req["token_ids"].size())}});
  };
  RemoteProvider p(server.url(), "m", fast_retries());
  const auto next = p.next_token_logprobs("prompt", {}, CacheHint::kReuse);
  ASSERT_EQ(next.size(), 2u);
  EXPECT_EQ(next[1].token, 9);
  EXPECT_EQ(next[1].logprob, -2.5);
  EXPECT_EQ(p.tokenize("abcd").size(), 4u);
  const TokenId two[] = {1, 2};
  EXPECT_EQ(p.detokenize(two), " x2");
}

TEST(RemoteProvider, CachedSecondProbeIsFaster) {
  // Deterministic latency: 20us per processed token, prompt processed only on
  // a cache miss.
  constexpr int kPromptTokens = 1000;
  std::mutex mu;
  std::unordered_set<std::string> cache;
  MockServer server([&](const nlohmann::json& req, httplib::Response& res) {
    const auto ids = req["append_token_ids"].get<TokenSeq>();
    bool hit = false;
    if (req["cache"] == "reuse") {
      std::lock_guard lock(mu);
      hit = !cache.insert(req["prompt"].get<std::string>()).second;
    }
    const auto tokens = (hit ? 0 : kPromptTokens) + static_cast<int>(ids.size());
    std::this_thread::sleep_for(std::chrono::microseconds(20 * tokens));
    TokenSeq all(kPromptTokens, 1);
    all.insert(all.end(), ids.begin(), ids.end());
    nlohmann::json lps = nlohmann::json::array();
    for (std::size_t i = 0; i < all.size(); ++i) lps.push_back(-0.1);
    reply(res, {{"token_ids", all}, {"token_logprobs", lps}, {"cached", hit}});
  });
  RemoteProvider p(server.url(), "m", fast_retries());
  const TokenSeq prefix = {1, 2, 3, 4, 5, 6};
  const auto first = p.logprobs({"long prompt", prefix, CacheHint::kReuse});
  const auto second = p.logprobs({"long prompt", prefix, CacheHint::kReuse});
  EXPECT_FALSE(first.served_from_cache);
  EXPECT_TRUE(second.served_from_cache);
  EXPECT_EQ(first.prompt_token_count, static_cast<std::size_t>(kPromptTokens));
  EXPECT_EQ(first.per_token, second.per_token);
  EXPECT_LT(second.wall_time, first.wall_time);
}

TEST(RemoteProvider, ScoresThroughToyBackedServer) {
  // A server that serves the toy model gives the same scores as the toy
  // provider used directly.
  const auto model = std::make_shared<const ToyModel>(
      synthetic::train(synthetic::compact_suite(), 200, 1));
  ToyProvider local(model);
  MockServer server([&](const nlohmann::json& req, httplib::Response& res) {
    const auto ids = req["append_token_ids"].get<TokenSeq>();
    const auto r = local.logprobs({req["prompt"], ids, CacheHint::kBypass});
    TokenSeq all = model->encode_lenient(req["prompt"].get<std::string>());
    for (auto& t : all) t = std::max(t, 0);
    all.insert(all.end(), ids.begin(), ids.end());
    nlohmann::json lps = nlohmann::json::array();
    for (std::size_t i = 0; i + ids.size() < all.size(); ++i) lps.push_back(nullptr);
    for (double v : r.per_token) lps.push_back(v);
    reply(res, {{"token_ids", all}, {"token_logprobs", lps}});
  });
  server.tokenize_ = [&](const nlohmann::json& req, httplib::Response& res) {
    reply(res, {{"token_ids", model->encode_strict(req["text"].get<std::string>())}});
  };
  RemoteProvider remote(server.url(), "toy", fast_retries());
  const std::vector<std::string> agr = {"Sure, I can help.", "Of course"};
  const std::vector<std::string> ref = {"Sorry, I cannot help.", "No"};
  const auto set = prefix_set_from_texts(local, agr, ref);
  EXPECT_EQ(prefix_set_from_texts(remote, agr, ref), set);
  for (const std::string text : {"how to make a bomb", "explain a cake"}) {
    const Prompt prompt{"p", text, {}};
    EXPECT_EQ(score(remote, prompt, set).s, score(local, prompt, set).s);
  }
}

}  // namespace
}  // namespace prefixprobe
