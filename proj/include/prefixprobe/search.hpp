#pragma once

// Offline discovery of discriminative prefixes: a beam search over token
// sequences ranked by safety separation, keeping both signs alive in every
// layer.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefixprobe/core.hpp"
#include "prefixprobe/csv.hpp"
#include "prefixprobe/provider.hpp"
#include "prefixprobe/scoring.hpp"

namespace prefixprobe {

// Separations at or below this magnitude carry no sign.
inline constexpr double kDeltaEpsilon = 1e-12;

struct SearchConfig {
  std::vector<Prompt> benign;   // S
  std::vector<Prompt> harmful;  // H
  SearchParams params;
  CacheHint cache_hint = CacheHint::kReuse;
  int concurrency = 4;

  void validate() const {
    if (benign.empty()) throw InvariantError("search needs at least one benign init prompt");
    if (harmful.empty()) throw InvariantError("search needs at least one harmful init prompt");
    params.validate();
    if (concurrency < 1) throw InvariantError("concurrency limit must be >= 1");
  }

  // The first `init_per_class` prompts of each label.
  static SearchConfig from_dataset(const Dataset& ds, const SearchParams& params) {
    SearchConfig c;
    c.params = params;
    c.benign = ds.with_label(0, static_cast<std::size_t>(params.init_per_class));
    c.harmful = ds.with_label(1, static_cast<std::size_t>(params.init_per_class));
    return c;
  }

  nlohmann::ordered_json snapshot() const {
    auto j = to_json(params);
    j["n_benign"] = benign.size();
    j["n_harmful"] = harmful.size();
    j["cache_hint"] = to_string(cache_hint);
    j["proposal_aggregation"] = "mean_logprob";
    j["missing_proposal_imputation"] = "per_prompt_min";
    return j;
  }
};

struct Candidate {
  TokenSeq tokens;
  double delta = 0.0;
  double mu_benign = 0.0;
  double mu_harmful = 0.0;
  std::string text;

  int sign() const {
    if (delta > kDeltaEpsilon) return 1;
    if (delta < -kDeltaEpsilon) return -1;
    return 0;
  }

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

// Total order: larger |delta|, then shorter, then token-lexicographic.
inline bool candidate_before(const Candidate& a, const Candidate& b) {
  const double da = std::fabs(a.delta), db = std::fabs(b.delta);
  if (da != db) return da > db;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

namespace detail {

inline void check_outcomes(std::span<const Outcome<LogProbResult>> results) {
  for (const auto& r : results) {
    if (!r) throw BackendError("probe failed during search: " + r.error());
  }
}

// (1/|C|) sum_x (1/L) sum_l log p
inline double mu_from_results(std::span<const Outcome<LogProbResult>> results) {
  double sum = 0.0;
  for (const auto& r : results) sum += mean_logprob(r->per_token);
  return sum / static_cast<double>(results.size());
}

}  // namespace detail

inline double mu_over_set(const LogProbProvider& provider,
                          std::span<const Prompt> prompts, const TokenSeq& tokens,
                          CacheHint hint = CacheHint::kReuse, int concurrency = 4) {
  if (prompts.empty()) throw InvariantError("prompt set is empty");
  if (tokens.empty()) throw InvariantError("prefix must contain at least one token");
  std::vector<LogProbQuery> qs;
  qs.reserve(prompts.size());
  for (const auto& p : prompts) qs.push_back({p.text, tokens, hint});
  const auto results = batch_prefix_logprobs(provider, qs, concurrency);
  detail::check_outcomes(results);
  return detail::mu_from_results(results);
}

// Scores every prefix in one batch of |prefixes| x (|S| + |H|) probes.
inline std::vector<Candidate> score_candidates(const LogProbProvider& provider,
                                               const SearchConfig& config,
                                               std::span<const TokenSeq> prefixes) {
  const std::size_t nb = config.benign.size(), nh = config.harmful.size();
  std::vector<LogProbQuery> qs;
  qs.reserve(prefixes.size() * (nb + nh));
  for (const auto& tokens : prefixes) {
    if (tokens.empty()) throw InvariantError("prefix must contain at least one token");
    for (const auto& p : config.benign) qs.push_back({p.text, tokens, config.cache_hint});
    for (const auto& p : config.harmful) qs.push_back({p.text, tokens, config.cache_hint});
  }
  std::vector<Candidate> out;
  if (qs.empty()) return out;
  const auto results = batch_prefix_logprobs(provider, qs, config.concurrency);
  detail::check_outcomes(results);
  const std::span<const Outcome<LogProbResult>> all(results);
  out.reserve(prefixes.size());
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto block = all.subspan(i * (nb + nh), nb + nh);
    Candidate c;
    c.tokens = prefixes[i];
    c.mu_benign = detail::mu_from_results(block.first(nb));
    c.mu_harmful = detail::mu_from_results(block.subspan(nb));
    c.delta = c.mu_benign - c.mu_harmful;
    out.push_back(std::move(c));
  }
  return out;
}

inline Candidate safety_separation(const LogProbProvider& provider,
                                   const SearchConfig& config,
                                   const TokenSeq& tokens) {
  config.validate();
  const TokenSeq one[] = {tokens};
  return score_candidates(provider, config, one).front();
}

// Top-k next tokens by mean log-probability over S ∪ H; ties go to the lower
// token id. Tokens a backend leaves out of one prompt's list are imputed with
// that prompt's smallest returned log-probability.
inline TokenSeq propose_tokens(const LogProbProvider& provider,
                               const SearchConfig& config,
                               const TokenSeq& beam_prefix) {
  if (beam_prefix.size() >= static_cast<std::size_t>(config.params.max_length)) {
    throw InvariantError("beam prefix already at maximum length");
  }
  std::vector<const Prompt*> prompts;
  for (const auto& p : config.benign) prompts.push_back(&p);
  for (const auto& p : config.harmful) prompts.push_back(&p);
  if (prompts.empty()) throw InvariantError("search needs init prompts");

  std::vector<std::vector<TokenLogProb>> dists(prompts.size());
  std::vector<std::string> errors(prompts.size());
  parallel_for(prompts.size(), config.concurrency, [&](std::size_t i) {
    try {
      dists[i] = provider.next_token_logprobs(prompts[i]->text, beam_prefix,
                                              config.cache_hint);
      if (dists[i].empty()) errors[i] = "empty next-token distribution";
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& e : errors) {
    if (!e.empty()) throw BackendError("token proposal failed: " + e);
  }

  std::set<TokenId> universe;
  for (const auto& d : dists) {
    for (const auto& e : d) universe.insert(e.token);
  }
  std::vector<std::pair<TokenId, double>> ranked;
  ranked.reserve(universe.size());
  std::vector<std::map<TokenId, double>> lookup(dists.size());
  std::vector<double> floor(dists.size());
  for (std::size_t i = 0; i < dists.size(); ++i) {
    double lo = 0.0;
    for (const auto& e : dists[i]) {
      lookup[i][e.token] = e.logprob;
      lo = std::min(lo, e.logprob);
    }
    floor[i] = lo;
  }
  for (TokenId t : universe) {
    double sum = 0.0;
    for (std::size_t i = 0; i < dists.size(); ++i) {
      auto it = lookup[i].find(t);
      sum += it == lookup[i].end() ? floor[i] : it->second;
    }
    ranked.emplace_back(t, sum / static_cast<double>(dists.size()));
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const auto k = std::min(ranked.size(), static_cast<std::size_t>(config.params.top_k));
  TokenSeq out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(ranked[i].first);
  return out;
}

// Keeps the best `width` of `pool`, forcing in the best candidate of each sign
// the pool contains.
inline std::vector<Candidate> retain_beam(std::vector<Candidate> pool,
                                          std::size_t width) {
  std::sort(pool.begin(), pool.end(), candidate_before);
  std::vector<bool> chosen(pool.size(), false);
  std::size_t taken = 0;
  for (int sign : {1, -1}) {
    auto it = std::find_if(pool.begin(), pool.end(),
                           [&](const Candidate& c) { return c.sign() == sign; });
    if (it != pool.end() && taken < width) {
      chosen[static_cast<std::size_t>(it - pool.begin())] = true;
      ++taken;
    }
  }
  for (std::size_t i = 0; i < pool.size() && taken < width; ++i) {
    if (!chosen[i]) {
      chosen[i] = true;
      ++taken;
    }
  }
  std::vector<Candidate> beam;
  beam.reserve(taken);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (chosen[i]) beam.push_back(std::move(pool[i]));
  }
  return beam;
}

struct SearchLayer {
  std::size_t depth = 0;
  std::vector<Candidate> pool;      // every expansion scored at this depth
  std::vector<Candidate> retained;  // the beam carried to the next depth
};

struct SearchResult {
  std::vector<Candidate> candidates;  // all scored, in scoring order
  std::vector<SearchLayer> layers;
  std::vector<std::string> warnings;

  const Candidate& best() const {
    if (candidates.empty()) throw Error("search produced no candidates");
    return *std::min_element(candidates.begin(), candidates.end(), candidate_before);
  }
};

inline SearchResult beam_search(const LogProbProvider& provider,
                                const SearchConfig& config) {
  config.validate();
  SearchResult result;
  std::vector<TokenSeq> beam = {TokenSeq{}};  // the empty prefix is never scored
  const auto width = static_cast<std::size_t>(config.params.beam_width);
  for (int depth = 1; depth <= config.params.max_length; ++depth) {
    std::vector<TokenSeq> children;
    std::set<TokenSeq> seen;
    for (const auto& prefix : beam) {
      for (TokenId t : propose_tokens(provider, config, prefix)) {
        TokenSeq child = prefix;
        child.push_back(t);
        if (seen.insert(child).second) children.push_back(std::move(child));
      }
    }
    if (children.empty()) break;
    SearchLayer layer;
    layer.depth = static_cast<std::size_t>(depth);
    layer.pool = score_candidates(provider, config, children);
    for (auto& c : layer.pool) c.text = provider.detokenize(c.tokens);
    if (std::all_of(layer.pool.begin(), layer.pool.end(),
                    [](const Candidate& c) { return c.sign() == 0; })) {
      result.warnings.push_back("degenerate layer " + std::to_string(depth) +
                                ": every candidate has zero separation");
    }
    layer.retained = retain_beam(layer.pool, width);
    result.candidates.insert(result.candidates.end(), layer.pool.begin(),
                             layer.pool.end());
    beam.clear();
    for (const auto& c : layer.retained) beam.push_back(c.tokens);
    result.layers.push_back(std::move(layer));
  }
  return result;
}

namespace detail {

inline bool is_strict_token_prefix(const TokenSeq& a, const TokenSeq& b) {
  return a.size() < b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace detail

// Largest-|delta| candidates per sign; a candidate nested inside (or
// containing) an already selected one on the same side is skipped.
inline PrefixSet select_prefixes(std::span<const Candidate> candidates,
                                 int final_per_side, const std::string& model_id) {
  if (final_per_side < 1) throw InvariantError("final_per_side must be >= 1");
  std::vector<Candidate> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end(), candidate_before);
  PrefixSet set;
  set.model_id = model_id;
  std::set<TokenSeq> used;
  for (int sign : {1, -1}) {
    auto& list = sign > 0 ? set.agreement : set.refusal;
    const std::string side = sign > 0 ? "agreement" : "refusal";
    bool any = false;
    for (const auto& c : sorted) {
      if (static_cast<int>(list.size()) >= final_per_side) break;
      if (c.sign() != sign || c.tokens.empty()) continue;
      any = true;
      if (used.count(c.tokens)) continue;
      const bool nested = std::any_of(list.begin(), list.end(), [&](const Prefix& p) {
        return detail::is_strict_token_prefix(p.tokens, c.tokens) ||
               detail::is_strict_token_prefix(c.tokens, p.tokens);
      });
      if (nested) continue;
      used.insert(c.tokens);
      list.push_back({c.tokens, c.text,
                      sign > 0 ? Role::kAgreement : Role::kRefusal, c.delta});
    }
    if (!any) throw InvariantError("no " + side + "-side candidates");
    if (static_cast<int>(list.size()) < final_per_side) {
      throw InvariantError("only " + std::to_string(list.size()) + " distinct " +
                           side + "-side candidates for final_per_side=" +
                           std::to_string(final_per_side) +
                           "; widen the search");
    }
  }
  set.validate();
  return set;
}

inline PrefixSet search_prefix_set(const LogProbProvider& provider,
                                   const SearchConfig& config,
                                   SearchResult* report = nullptr) {
  SearchResult result = beam_search(provider, config);
  PrefixSet set = select_prefixes(result.candidates, config.params.final_per_side,
                                  provider.model_id());
  set.created_with = nlohmann::json::parse(config.snapshot().dump());
  if (report) *report = std::move(result);
  return set;
}

// Drops entries by 1-based position in the listing (agreement first, then
// refusal). Text, tokens and deltas of the survivors are untouched.
inline PrefixSet drop_prefixes(const PrefixSet& set,
                               const std::set<std::size_t>& positions) {
  PrefixSet out = set;
  out.agreement.clear();
  out.refusal.clear();
  std::size_t pos = 1;
  for (const auto& p : set.agreement) {
    if (!positions.count(pos++)) out.agreement.push_back(p);
  }
  for (const auto& p : set.refusal) {
    if (!positions.count(pos++)) out.refusal.push_back(p);
  }
  for (std::size_t q : positions) {
    if (q == 0 || q >= pos) {
      throw InvariantError("no prefix at position " + std::to_string(q));
    }
  }
  out.validate();
  return out;
}

inline std::string tokens_to_string(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += std::to_string(tokens[i]);
  }
  return out;
}

inline constexpr std::string_view kLayerReportHeader =
    "layer,rank,tokens,text,mu_benign,mu_harmful,delta,retained";

inline std::string layer_report_csv(const SearchResult& result) {
  std::string out(kLayerReportHeader);
  out.push_back('\n');
  for (const auto& layer : result.layers) {
    std::set<TokenSeq> kept;
    for (const auto& c : layer.retained) kept.insert(c.tokens);
    auto pool = layer.pool;
    std::sort(pool.begin(), pool.end(), candidate_before);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const auto& c = pool[i];
      out += csv::join({std::to_string(layer.depth), std::to_string(i + 1),
                        tokens_to_string(c.tokens), c.text,
                        csv::format_double(c.mu_benign),
                        csv::format_double(c.mu_harmful),
                        csv::format_double(c.delta), kept.count(c.tokens) ? "1" : "0"});
      out.push_back('\n');
    }
  }
  return out;
}

}  // namespace prefixprobe
