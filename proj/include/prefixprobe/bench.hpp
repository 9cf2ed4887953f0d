#pragma once

// Detection-overhead measurement with and without prompt-cache reuse, the
// equivalent-token cost model, and a simulated-latency backend for testing
// that model without a GPU server.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefixprobe/core.hpp"
#include "prefixprobe/csv.hpp"
#include "prefixprobe/provider.hpp"
#include "prefixprobe/scoring.hpp"

namespace prefixprobe {

using Seconds = std::chrono::duration<double>;

// Wraps a value provider and reports a deterministic latency instead of the
// measured one: (T_base + L) * uncached_ms_per_token on a cache miss and
// L * cached_ms_per_token on a hit.
class SimulatedLatencyProvider : public LogProbProvider {
 public:
  struct Model {
    double uncached_ms_per_token = 1.0;
    double cached_ms_per_token = 1.0;
    // When set, replaces the prompt length the inner provider reports.
    std::optional<std::size_t> fixed_prompt_tokens;
    // Emulates a server that silently ignores the cache hint.
    bool ignore_cache_hint = false;
  };

  SimulatedLatencyProvider(std::shared_ptr<const LogProbProvider> inner, Model model)
      : inner_(std::move(inner)), model_(model) {
    if (!inner_) throw InvariantError("simulated provider needs an inner provider");
    if (!(model_.uncached_ms_per_token >= 0) || !(model_.cached_ms_per_token >= 0)) {
      throw InvariantError("latency per token must be non-negative");
    }
  }

  std::string model_id() const override { return inner_->model_id(); }

  LogProbResult logprobs(const LogProbQuery& query) const override {
    LogProbResult r = inner_->logprobs(query);
    if (model_.fixed_prompt_tokens) r.prompt_token_count = *model_.fixed_prompt_tokens;
    bool hit = false;
    if (!model_.ignore_cache_hint && query.cache_hint == CacheHint::kReuse) {
      std::lock_guard lock(mutex_);
      hit = !cache_.insert(query.prompt_text).second;
    }
    const auto L = static_cast<double>(query.prefix_tokens.size());
    const double ms =
        hit ? L * model_.cached_ms_per_token
            : (static_cast<double>(r.prompt_token_count) + L) * model_.uncached_ms_per_token;
    r.served_from_cache = hit;
    r.wall_time = std::chrono::duration_cast<std::chrono::nanoseconds>(
        std::chrono::duration<double, std::milli>(ms));
    return r;
  }

  std::vector<TokenLogProb> next_token_logprobs(std::string_view prompt_text,
                                                std::span<const TokenId> prefix,
                                                CacheHint hint) const override {
    return inner_->next_token_logprobs(prompt_text, prefix, hint);
  }
  TokenSeq tokenize(std::string_view text) const override {
    return inner_->tokenize(text);
  }
  std::string detokenize(std::span<const TokenId> tokens) const override {
    return inner_->detokenize(tokens);
  }
  bool honors_cache_hint() const override { return !model_.ignore_cache_hint; }

  void clear_cache() {
    std::lock_guard lock(mutex_);
    cache_.clear();
  }

 private:
  std::shared_ptr<const LogProbProvider> inner_;
  Model model_;
  mutable std::mutex mutex_;
  mutable std::unordered_set<std::string> cache_;
};

struct OverheadReport {
  Seconds t_no_cache{0};  // median per-detection probe time, cache bypassed
  Seconds t_cache{0};     // same with cache reuse
  double speedup = 0.0;
  std::size_t c_extra_tokens = 0;  // sum of prefix lengths
  std::size_t t_base_tokens = 0;   // median prompt length
  double ratio = 0.0;              // mean over prompts of c_extra / T_base
  std::size_t n_samples = 0;       // repetitions per mode
  std::size_t n_prompts = 0;
  Seconds iqr_no_cache{0};
  Seconds iqr_cache{0};
  std::size_t t_base_min = 0;
  std::size_t t_base_max = 0;
  bool cache_distinguishable = true;
};

// Mean over prompts of (sum of prefix lengths) / T_base.
inline double equivalent_token_ratio(const PrefixSet& set,
                                     std::span<const std::size_t> prompt_token_counts) {
  if (prompt_token_counts.empty()) throw InvariantError("no prompt token counts");
  if (set.size() == 0) throw InvariantError("prefix set is empty");
  const auto extra = static_cast<double>(set.total_tokens());
  double sum = 0.0;
  for (auto t : prompt_token_counts) {
    if (t == 0) throw InvariantError("prompt token count must be positive");
    sum += extra / static_cast<double>(t);
  }
  return sum / static_cast<double>(prompt_token_counts.size());
}

// Report from already-known timings (e.g. published measurements).
inline OverheadReport make_overhead_report(Seconds t_no_cache, Seconds t_cache,
                                           std::size_t c_extra_tokens,
                                           std::size_t t_base_tokens) {
  if (!(t_cache.count() > 0) || !(t_no_cache.count() > 0)) {
    throw InvariantError("overhead timings must be positive");
  }
  if (t_base_tokens == 0) throw InvariantError("prompt token count must be positive");
  OverheadReport r;
  r.t_no_cache = t_no_cache;
  r.t_cache = t_cache;
  r.speedup = t_no_cache / t_cache;
  r.c_extra_tokens = c_extra_tokens;
  r.t_base_tokens = t_base_tokens;
  r.t_base_min = r.t_base_max = t_base_tokens;
  r.ratio = static_cast<double>(c_extra_tokens) / static_cast<double>(t_base_tokens);
  return r;
}

namespace detail {

// Linear-interpolated quantile of a sorted sample.
inline double quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

struct ModeTiming {
  std::vector<double> rep_means;  // seconds per detection, one per repetition
  std::vector<double> scores;     // s per prompt from the last repetition
  std::vector<std::size_t> prompt_tokens;
  bool any_cache_hit = false;
};

// Probes run strictly one after another so latencies are attributable.
inline double timed_detection(const LogProbProvider& provider, const Prompt& prompt,
                              const PrefixSet& set, CacheHint hint, double* s,
                              std::size_t* t_base, bool* hit) {
  double seconds = 0.0;
  std::vector<double> agr, ref;
  for (const auto* list : {&set.agreement, &set.refusal}) {
    for (const auto& p : *list) {
      const auto r = prefix_logprobs(provider, {prompt.text, p.tokens, hint});
      seconds += std::chrono::duration<double>(r.wall_time).count();
      (list == &set.agreement ? agr : ref).push_back(mean_logprob(r.per_token));
      *t_base = r.prompt_token_count;
      *hit = *hit || r.served_from_cache;
    }
  }
  *s = assemble_score(std::move(agr), std::move(ref)).s;
  return seconds;
}

inline ModeTiming time_mode(const LogProbProvider& provider,
                            std::span<const Prompt> prompts, const PrefixSet& set,
                            CacheHint hint, int repetitions) {
  ModeTiming out;
  out.scores.resize(prompts.size());
  out.prompt_tokens.resize(prompts.size());
  bool warm_hit = false;
  for (std::size_t i = 0; i < prompts.size(); ++i) {  // warm-up, untimed
    timed_detection(provider, prompts[i], set, hint, &out.scores[i],
                    &out.prompt_tokens[i], &warm_hit);
  }
  for (int rep = 0; rep < repetitions; ++rep) {
    double total = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      double s = 0.0;
      total += timed_detection(provider, prompts[i], set, hint, &s,
                               &out.prompt_tokens[i], &out.any_cache_hit);
      if (s != out.scores[i]) {
        throw BackendError("score for prompt '" + prompts[i].id +
                           "' changed between repetitions");
      }
    }
    out.rep_means.push_back(total / static_cast<double>(prompts.size()));
  }
  std::sort(out.rep_means.begin(), out.rep_means.end());
  return out;
}

}  // namespace detail

inline OverheadReport measure_overhead(const LogProbProvider& provider,
                                       std::span<const Prompt> prompts,
                                       const PrefixSet& set, int repetitions) {
  if (repetitions < 3) throw InvariantError("repetitions must be >= 3");
  if (prompts.empty()) throw InvariantError("no prompts to benchmark");
  set.validate();
  const auto bypass =
      detail::time_mode(provider, prompts, set, CacheHint::kBypass, repetitions);
  const auto reuse =
      detail::time_mode(provider, prompts, set, CacheHint::kReuse, repetitions);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (bypass.scores[i] != reuse.scores[i]) {
      throw BackendError("cache reuse changed the score of prompt '" +
                         prompts[i].id + "'");
    }
  }
  OverheadReport r;
  r.t_no_cache = Seconds(detail::quantile(bypass.rep_means, 0.5));
  r.t_cache = Seconds(detail::quantile(reuse.rep_means, 0.5));
  r.iqr_no_cache = Seconds(detail::quantile(bypass.rep_means, 0.75) -
                           detail::quantile(bypass.rep_means, 0.25));
  r.iqr_cache = Seconds(detail::quantile(reuse.rep_means, 0.75) -
                        detail::quantile(reuse.rep_means, 0.25));
  r.speedup = r.t_cache.count() > 0 ? r.t_no_cache / r.t_cache : 0.0;
  r.c_extra_tokens = set.total_tokens();
  std::vector<double> lengths(bypass.prompt_tokens.begin(), bypass.prompt_tokens.end());
  std::sort(lengths.begin(), lengths.end());
  r.t_base_tokens = static_cast<std::size_t>(std::llround(detail::quantile(lengths, 0.5)));
  r.t_base_min = static_cast<std::size_t>(lengths.front());
  r.t_base_max = static_cast<std::size_t>(lengths.back());
  if (r.t_base_min > 0) r.ratio = equivalent_token_ratio(set, bypass.prompt_tokens);
  r.n_samples = static_cast<std::size_t>(repetitions);
  r.n_prompts = prompts.size();
  r.cache_distinguishable = provider.honors_cache_hint() && reuse.any_cache_hit &&
                            r.t_cache < r.t_no_cache;
  return r;
}

struct OverheadPoint {
  std::size_t pairs;
  OverheadReport report;
};

// Overhead as the first 1..n prefix pairs of `set` are used.
inline std::vector<OverheadPoint> overhead_by_pair_count(
    const LogProbProvider& provider, std::span<const Prompt> prompts,
    const PrefixSet& set, int repetitions) {
  const auto max_pairs = std::min(set.agreement.size(), set.refusal.size());
  std::vector<OverheadPoint> out;
  for (std::size_t k = 1; k <= max_pairs; ++k) {
    out.push_back({k, measure_overhead(provider, prompts, set.truncated(k), repetitions)});
  }
  return out;
}

inline nlohmann::ordered_json to_json(const OverheadReport& r) {
  nlohmann::ordered_json j;
  j["overhead_no_cache_s"] = r.t_no_cache.count();
  j["overhead_cache_s"] = r.t_cache.count();
  j["speedup"] = r.speedup;
  j["c_extra_tokens"] = r.c_extra_tokens;
  j["t_base_tokens"] = r.t_base_tokens;
  j["t_base_min"] = r.t_base_min;
  j["t_base_max"] = r.t_base_max;
  j["ratio"] = r.ratio;
  j["n_samples"] = r.n_samples;
  j["n_prompts"] = r.n_prompts;
  j["iqr_no_cache_s"] = r.iqr_no_cache.count();
  j["iqr_cache_s"] = r.iqr_cache.count();
  j["status"] = r.cache_distinguishable ? "ok" : "cache-indistinguishable";
  return j;
}

inline constexpr std::string_view kOverheadCsvHeader =
    "overhead_no_cache_s,overhead_cache_s,speedup";

inline std::string overhead_csv_row(const OverheadReport& r) {
  return csv::join({csv::format_double(r.t_no_cache.count()),
                    csv::format_double(r.t_cache.count()),
                    csv::format_double(r.speedup)});
}

}  // namespace prefixprobe
