#pragma once

// HTTP client for inference servers that echo per-token log-probabilities.
//
// Wire contract (JSON over HTTP POST):
//
//   POST <path>            (default /v1/logprobs)
//     request  {"model", "prompt", "template": "raw"|"chat",
//               "append_token_ids": [..], "echo_logprobs": true,
//               "cache": "reuse"|"bypass", "top_logprobs": n}
//     response {"token_ids": [..], "token_logprobs": [null|number, ..],
//               "cached": bool, "next_top_logprobs": [{"token_id", "logprob"}]}
//
//   token_ids/token_logprobs cover the whole templated sequence; the client
//   keeps the last L positions and requires their ids to equal the appended
//   tokens. next_top_logprobs is only read when top_logprobs > 0.
//
//   POST /tokenize   {"model", "text"}       -> {"token_ids": [..]}
//   POST /detokenize {"model", "token_ids"}  -> {"text": ".."}

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "prefixprobe/core.hpp"
#include "prefixprobe/provider.hpp"

namespace prefixprobe {

inline constexpr const char* kAuthTokenEnv = "PREFIXPROBE_API_TOKEN";

struct RemoteOptions {
  TemplateMode template_mode = TemplateMode::kRaw;
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{100};
  double timeout_seconds = 30.0;
  int top_logprobs = 64;  // entries requested for next-token proposals
};

class RemoteProvider : public LogProbProvider {
 public:
  RemoteProvider(std::string endpoint, std::string model_id,
                 RemoteOptions options = {})
      : model_id_(std::move(model_id)), options_(options) {
    const auto scheme = endpoint.find("://");
    if (scheme == std::string::npos) {
      throw InvariantError("backend URL needs a scheme: " + endpoint);
    }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (endpoint.compare(0, scheme, "http") != 0) {
      throw InvariantError("only http:// endpoints are supported in this build");
    }
#endif
    const auto slash = endpoint.find('/', scheme + 3);
    if (slash == std::string::npos) {
      base_ = endpoint;
      path_ = "/v1/logprobs";
    } else {
      base_ = endpoint.substr(0, slash);
      path_ = endpoint.substr(slash);
    }
    if (options_.attempts < 1) throw InvariantError("retry attempts must be >= 1");
    if (const char* token = std::getenv(kAuthTokenEnv)) auth_token_ = token;
  }

  std::string model_id() const override { return model_id_; }
  const std::string& base_url() const { return base_; }
  const std::string& path() const { return path_; }

  LogProbResult logprobs(const LogProbQuery& query) const override {
    const auto L = query.prefix_tokens.size();
    nlohmann::json body = request_body(query.prompt_text, query.prefix_tokens,
                                       query.cache_hint, 0);
    const auto start = std::chrono::steady_clock::now();
    const nlohmann::json resp = post(path_, body);
    LogProbResult r;
    r.wall_time = std::chrono::steady_clock::now() - start;

    const auto ids = aligned_ids(resp, query.prefix_tokens);
    if (!resp.contains("token_logprobs") || !resp["token_logprobs"].is_array()) {
      throw BackendError("response is missing log-probabilities");
    }
    const auto& lps = resp["token_logprobs"];
    if (lps.size() != ids.size()) {
      throw BackendError("token-count mismatch: " + std::to_string(ids.size()) +
                         " token ids but " + std::to_string(lps.size()) +
                         " log-probabilities");
    }
    r.prompt_token_count = ids.size() - L;
    r.per_token.reserve(L);
    for (std::size_t i = ids.size() - L; i < ids.size(); ++i) {
      if (!lps[i].is_number()) {
        throw BackendError("response is missing log-probabilities at position " +
                           std::to_string(i));
      }
      const double v = lps[i].get<double>();
      if (!std::isfinite(v)) {
        throw BackendError("non-finite log-probability at position " +
                           std::to_string(i));
      }
      r.per_token.push_back(v);
    }
    r.served_from_cache = resp.value("cached", false);
    return r;
  }

  std::vector<TokenLogProb> next_token_logprobs(std::string_view prompt_text,
                                                std::span<const TokenId> prefix,
                                                CacheHint hint) const override {
    nlohmann::json body = request_body(prompt_text, prefix, hint,
                                       std::max(1, options_.top_logprobs));
    const nlohmann::json resp = post(path_, body);
    if (!prefix.empty()) aligned_ids(resp, prefix);
    if (!resp.contains("next_top_logprobs") ||
        !resp["next_top_logprobs"].is_array() ||
        resp["next_top_logprobs"].empty()) {
      throw BackendError("response is missing next-token log-probabilities");
    }
    std::vector<TokenLogProb> out;
    for (const auto& e : resp["next_top_logprobs"]) {
      if (!e.contains("token_id") || !e.contains("logprob") ||
          !e["logprob"].is_number()) {
        throw BackendError("malformed next_top_logprobs entry");
      }
      const double v = e["logprob"].get<double>();
      if (!std::isfinite(v)) throw BackendError("non-finite next-token log-probability");
      out.push_back({e["token_id"].get<TokenId>(), v});
    }
    return out;
  }

  TokenSeq tokenize(std::string_view text) const override {
    const nlohmann::json resp =
        post("/tokenize", {{"model", model_id_}, {"text", std::string(text)}});
    if (!resp.contains("token_ids")) throw BackendError("tokenize response has no token_ids");
    return resp["token_ids"].get<TokenSeq>();
  }

  std::string detokenize(std::span<const TokenId> tokens) const override {
    const nlohmann::json resp = post(
        "/detokenize",
        {{"model", model_id_}, {"token_ids", TokenSeq(tokens.begin(), tokens.end())}});
    if (!resp.contains("text")) throw BackendError("detokenize response has no text");
    return resp["text"].get<std::string>();
  }

 private:
  nlohmann::json request_body(std::string_view prompt,
                              std::span<const TokenId> prefix, CacheHint hint,
                              int top_logprobs) const {
    return {{"model", model_id_},
            {"prompt", std::string(prompt)},
            {"template", to_string(options_.template_mode)},
            {"append_token_ids", TokenSeq(prefix.begin(), prefix.end())},
            {"echo_logprobs", true},
            {"cache", to_string(hint)},
            {"top_logprobs", top_logprobs}};
  }

  // Full-sequence ids whose tail must be exactly the appended tokens.
  static TokenSeq aligned_ids(const nlohmann::json& resp,
                              std::span<const TokenId> prefix) {
    if (!resp.contains("token_ids") || !resp["token_ids"].is_array()) {
      throw BackendError("response is missing token_ids");
    }
    TokenSeq ids;
    try {
      ids = resp["token_ids"].get<TokenSeq>();
    } catch (const nlohmann::json::exception&) {
      throw BackendError("token_ids must be integers");
    }
    if (ids.size() < prefix.size() ||
        !std::equal(prefix.begin(), prefix.end(),
                    ids.end() - static_cast<std::ptrdiff_t>(prefix.size()))) {
      throw BackendError(
          "backend tokenization does not align with the requested prefix tokens");
    }
    return ids;
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& body) const {
    // Once an endpoint has refused every attempt, later calls fail at once
    // instead of repeating the full backoff schedule per probe.
    if (unreachable_.load()) {
      throw TransportError("backend " + base_ + path +
                           " marked unreachable after an earlier failure");
    }
    const std::string payload = body.dump();
    auto backoff = options_.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= options_.attempts; ++attempt) {
      httplib::Client client(base_);
      const auto secs = static_cast<time_t>(options_.timeout_seconds);
      const auto usecs = static_cast<time_t>(
          (options_.timeout_seconds - static_cast<double>(secs)) * 1e6);
      client.set_connection_timeout(secs, usecs);
      client.set_read_timeout(secs, usecs);
      client.set_write_timeout(secs, usecs);
      httplib::Headers headers;
      if (!auth_token_.empty()) {
        headers.emplace("Authorization", "Bearer " + auth_token_);
      }
      auto res = client.Post(path, headers, payload, "application/json");
      if (res && res->status >= 200 && res->status < 300) {
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::parse_error& e) {
          throw BackendError(std::string("backend returned invalid JSON: ") + e.what());
        }
      }
      if (res && res->status < 500) {
        throw BackendError("backend rejected request with HTTP " +
                           std::to_string(res->status) + ": " + res->body);
      }
      last_error = res ? "HTTP " + std::to_string(res->status)
                       : httplib::to_string(res.error());
      if (attempt < options_.attempts) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
    if (!last_error.starts_with("HTTP ")) unreachable_.store(true);
    throw TransportError("backend " + base_ + path + " unreachable after " +
                         std::to_string(options_.attempts) +
                         " attempts: " + last_error);
  }

  std::string base_;
  std::string path_;
  std::string model_id_;
  RemoteOptions options_;
  std::string auth_token_;
  mutable std::atomic<bool> unreachable_{false};
};

inline std::unique_ptr<LogProbProvider> remote_provider(
    const std::string& endpoint, const std::string& model_id,
    TemplateMode template_mode, RemoteOptions options = {}) {
  options.template_mode = template_mode;
  return std::make_unique<RemoteProvider>(endpoint, model_id, options);
}

}  // namespace prefixprobe
