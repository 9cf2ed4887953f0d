#pragma once

// Harmfulness score: mean per-prefix log-probability of refusal openings minus
// that of agreement openings, thresholded into a decision.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "prefixprobe/core.hpp"
#include "prefixprobe/csv.hpp"
#include "prefixprobe/provider.hpp"

namespace prefixprobe {

struct HarmfulnessScore {
  double ell_ref = 0.0;
  double ell_agr = 0.0;
  double s = 0.0;
  // Per-prefix mean log-probabilities, aligned with the set's lists.
  std::vector<double> agreement_means;
  std::vector<double> refusal_means;

  friend bool operator==(const HarmfulnessScore&, const HarmfulnessScore&) = default;
};

struct Decision {
  HarmfulnessScore score;
  double tau = 0.0;
  bool harmful = false;

  friend bool operator==(const Decision&, const Decision&) = default;
};

struct ScoringOptions {
  CacheHint cache_hint = CacheHint::kReuse;
  int concurrency = 4;
};

namespace detail {

inline double mean_of(std::span<const double> xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  return sum / static_cast<double>(xs.size());
}

inline HarmfulnessScore assemble_score(std::vector<double> agreement_means,
                                       std::vector<double> refusal_means) {
  HarmfulnessScore sc;
  sc.ell_agr = mean_of(agreement_means);
  sc.ell_ref = mean_of(refusal_means);
  sc.s = sc.ell_ref - sc.ell_agr;
  sc.agreement_means = std::move(agreement_means);
  sc.refusal_means = std::move(refusal_means);
  return sc;
}

inline std::vector<LogProbQuery> probe_queries(const Prompt& prompt,
                                               const PrefixSet& set,
                                               CacheHint hint) {
  std::vector<LogProbQuery> qs;
  qs.reserve(set.size());
  for (const auto* list : {&set.agreement, &set.refusal}) {
    for (const auto& p : *list) qs.push_back({prompt.text, p.tokens, hint});
  }
  return qs;
}

inline void check_tau(double tau) {
  if (!std::isfinite(tau)) throw InvariantError("threshold tau must be finite");
}

}  // namespace detail

// (1/L) sum_l log p(t_l | x, t_<l)
inline double mean_logprob(std::span<const double> per_token) {
  return detail::mean_of(per_token);
}

inline double prefix_mean_logprob(const LogProbProvider& provider,
                                  const Prompt& prompt, const Prefix& prefix,
                                  CacheHint hint = CacheHint::kReuse) {
  const auto r = prefix_logprobs(provider, {prompt.text, prefix.tokens, hint});
  return mean_logprob(r.per_token);
}

inline Decision decide(HarmfulnessScore score, double tau) {
  detail::check_tau(tau);
  Decision d;
  d.harmful = score.s > tau;  // ties are benign
  d.tau = tau;
  d.score = std::move(score);
  return d;
}

inline HarmfulnessScore score(const LogProbProvider& provider,
                              const Prompt& prompt, const PrefixSet& set,
                              const ScoringOptions& options = {}) {
  set.validate();
  const auto queries = detail::probe_queries(prompt, set, options.cache_hint);
  const auto results =
      batch_prefix_logprobs(provider, queries, options.concurrency);
  std::vector<double> agr, ref;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i]) {
      throw BackendError("probe failed for prompt '" + prompt.id +
                         "': " + results[i].error());
    }
    const double m = mean_logprob(results[i]->per_token);
    (i < set.agreement.size() ? agr : ref).push_back(m);
  }
  return detail::assemble_score(std::move(agr), std::move(ref));
}

inline Decision classify(const LogProbProvider& provider, const Prompt& prompt,
                         const PrefixSet& set, double tau,
                         const ScoringOptions& options = {}) {
  detail::check_tau(tau);
  return decide(score(provider, prompt, set, options), tau);
}

// One batched probe for every (prompt, prefix) pair; decisions are positional.
inline std::vector<Outcome<Decision>> score_batch(
    const LogProbProvider& provider, std::span<const Prompt> prompts,
    const PrefixSet& set, double tau, const ScoringOptions& options = {}) {
  detail::check_tau(tau);
  set.validate();
  std::vector<Outcome<Decision>> out;
  if (prompts.empty()) return out;
  std::vector<LogProbQuery> queries;
  queries.reserve(prompts.size() * set.size());
  for (const auto& p : prompts) {
    auto qs = detail::probe_queries(p, set, options.cache_hint);
    queries.insert(queries.end(), std::make_move_iterator(qs.begin()),
                   std::make_move_iterator(qs.end()));
  }
  const auto results =
      batch_prefix_logprobs(provider, queries, options.concurrency);
  const std::size_t per = set.size();
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::vector<double> agr, ref;
    std::string error;
    for (std::size_t j = 0; j < per && error.empty(); ++j) {
      const auto& r = results[i * per + j];
      if (!r) {
        error = r.error();
        break;
      }
      const double m = mean_logprob(r->per_token);
      (j < set.agreement.size() ? agr : ref).push_back(m);
    }
    if (!error.empty()) {
      out.push_back(Outcome<Decision>::failure("prompt '" + prompts[i].id +
                                               "': " + error));
    } else {
      out.push_back(Outcome<Decision>::success(
          decide(detail::assemble_score(std::move(agr), std::move(ref)), tau)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export

inline constexpr std::string_view kDecisionCsvHeader =
    "prompt_id,ell_ref,ell_agr,s,harmful";
inline constexpr std::string_view kScoreCsvHeader =
    "prompt_id,ell_ref,ell_agr,s,label";

inline std::string decision_csv_row(const Prompt& prompt, const Decision& d) {
  return csv::join({prompt.id, csv::format_double(d.score.ell_ref),
                    csv::format_double(d.score.ell_agr),
                    csv::format_double(d.score.s), d.harmful ? "1" : "0"});
}

inline std::string score_csv_row(const Prompt& prompt,
                                 const HarmfulnessScore& sc) {
  return csv::join({prompt.id, csv::format_double(sc.ell_ref),
                    csv::format_double(sc.ell_agr), csv::format_double(sc.s),
                    prompt.label ? std::to_string(*prompt.label) : ""});
}

// ---------------------------------------------------------------------------
// Hand-written openings used before any search has been run.

inline const std::vector<std::string>& manual_agreement_texts() {
  static const std::vector<std::string> texts = {
      "Of course, let's work through this step by step.",
      "Sure, I'd be happy to help."};
  return texts;
}

inline const std::vector<std::string>& manual_refusal_texts() {
  static const std::vector<std::string> texts = {
      "I'm sorry, but I can't provide help on that.",
      "Sorry, I cannot help with that."};
  return texts;
}

// Builds a set from display texts using the provider's own tokenizer.
inline PrefixSet prefix_set_from_texts(const LogProbProvider& provider,
                                       const std::vector<std::string>& agreement,
                                       const std::vector<std::string>& refusal) {
  PrefixSet set;
  set.model_id = provider.model_id();
  for (const auto& t : agreement) {
    set.agreement.push_back({provider.tokenize(t), t, Role::kAgreement, {}});
  }
  for (const auto& t : refusal) {
    set.refusal.push_back({provider.tokenize(t), t, Role::kRefusal, {}});
  }
  set.validate();
  return set;
}

inline PrefixSet manual_prefix_set(const LogProbProvider& provider) {
  auto set = prefix_set_from_texts(provider, manual_agreement_texts(),
                                   manual_refusal_texts());
  set.created_with = {{"source", "manual"}};
  return set;
}

}  // namespace prefixprobe
