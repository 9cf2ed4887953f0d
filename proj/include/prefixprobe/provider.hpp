#pragma once

// The log-probability primitive every other module is built on, plus the
// batching layer that bounds in-flight probes.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "prefixprobe/core.hpp"
#include "prefixprobe/error.hpp"

namespace prefixprobe {

enum class CacheHint { kReuse, kBypass };

inline std::string_view to_string(CacheHint h) {
  return h == CacheHint::kReuse ? "reuse" : "bypass";
}

// Prompt text followed by probe tokens (the prompt/prefix concatenation).
struct LogProbQuery {
  std::string prompt_text;
  TokenSeq prefix_tokens;
  CacheHint cache_hint = CacheHint::kReuse;
};

struct LogProbResult {
  std::vector<double> per_token;  // log p(t_l | x, t_<l), nats
  std::size_t prompt_token_count = 0;
  bool served_from_cache = false;
  std::chrono::nanoseconds wall_time{0};
};

struct TokenLogProb {
  TokenId token;
  double logprob;
};

class LogProbProvider {
 public:
  virtual ~LogProbProvider() = default;

  virtual std::string model_id() const = 0;

  // Teacher-forced conditionals of every prefix token. Values must not depend
  // on the cache hint.
  virtual LogProbResult logprobs(const LogProbQuery& query) const = 0;

  // Next-token distribution after prompt ⊕ prefix (prefix may be empty).
  // Backends that cannot return the full vocabulary return their top entries.
  virtual std::vector<TokenLogProb> next_token_logprobs(
      std::string_view prompt_text, std::span<const TokenId> prefix,
      CacheHint hint) const = 0;

  virtual TokenSeq tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const TokenId> tokens) const = 0;

  // False for backends known to ignore CacheHint.
  virtual bool honors_cache_hint() const { return true; }
};

// Validated single probe: exactly L finite, non-positive conditionals.
inline LogProbResult prefix_logprobs(const LogProbProvider& provider,
                                     const LogProbQuery& query) {
  if (query.prefix_tokens.empty()) {
    throw InvariantError("probe prefix must contain at least one token");
  }
  LogProbResult r = provider.logprobs(query);
  if (r.per_token.size() != query.prefix_tokens.size()) {
    throw BackendError("token-count mismatch: requested " +
                       std::to_string(query.prefix_tokens.size()) +
                       " prefix tokens, backend returned " +
                       std::to_string(r.per_token.size()) + " log-probabilities");
  }
  for (double v : r.per_token) {
    if (!std::isfinite(v)) throw BackendError("non-finite log-probability from backend");
    if (v > 0.0) throw BackendError("positive log-probability from backend");
  }
  return r;
}

// Runs `task(i)` for i in [0, n) with at most `concurrency` in flight.
template <typename Task>
void parallel_for(std::size_t n, int concurrency, Task&& task) {
  const auto workers = static_cast<std::size_t>(std::max(1, concurrency));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  const auto count = std::min(workers, n);
  pool.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        task(i);
      }
    });
  }
}

// Results are positional. Throws only when every query failed.
inline std::vector<Outcome<LogProbResult>> batch_prefix_logprobs(
    const LogProbProvider& provider, std::span<const LogProbQuery> queries,
    int concurrency = 4) {
  if (concurrency < 1) throw InvariantError("concurrency limit must be >= 1");
  std::vector<Outcome<LogProbResult>> results(queries.size());
  parallel_for(queries.size(), concurrency, [&](std::size_t i) {
    try {
      results[i] = Outcome<LogProbResult>::success(
          prefix_logprobs(provider, queries[i]));
    } catch (const std::exception& e) {
      results[i] = Outcome<LogProbResult>::failure(e.what());
    }
  });
  if (!results.empty() &&
      std::none_of(results.begin(), results.end(),
                   [](const auto& r) { return r.ok(); })) {
    throw BackendError("all " + std::to_string(results.size()) +
                       " probes failed; first error: " + results.front().error());
  }
  return results;
}

}  // namespace prefixprobe
