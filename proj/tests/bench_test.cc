#include "prefixprobe/bench.hpp"

#include <gtest/gtest.h>

#include "prefixprobe/synthetic.hpp"
#include "prefixprobe/toy_model.hpp"

namespace prefixprobe {
namespace {

// `pairs` agreement/refusal pairs; prefix i repeats token id i `len` times.
PrefixSet uniform_set(std::size_t pairs, std::size_t len, std::size_t V) {
  PrefixSet set;
  set.model_id = "toy";
  TokenId next = 0;
  auto make = [&](Role role) {
    Prefix p;
    p.role = role;
    p.tokens.assign(len, static_cast<TokenId>(static_cast<std::size_t>(next++) % V));
    return p;
  };
  for (std::size_t i = 0; i < pairs; ++i) {
    set.agreement.push_back(make(Role::kAgreement));
    set.refusal.push_back(make(Role::kRefusal));
  }
  set.validate();
  return set;
}

std::shared_ptr<const ToyProvider> toy() {
  static auto p = std::make_shared<const ToyProvider>(
      synthetic::train(synthetic::standard_suite(), 1500, 7));
  return p;
}

std::vector<Prompt> prompts(std::size_t n) {
  return synthetic::make_prompts(synthetic::standard_suite(), n, 3, "bench").prompts;
}

TEST(OverheadReport, PublishedTimings) {
  const auto r = make_overhead_report(Seconds(0.2463), Seconds(0.0154), 60, 600);
  EXPECT_NEAR(r.speedup, 16.0, 0.1);
  EXPECT_EQ(r.ratio, 0.1);
  const auto unit = make_overhead_report(Seconds(1), Seconds(1), 1, 1);
  EXPECT_EQ(unit.ratio, 1.0);
  EXPECT_EQ(unit.c_extra_tokens, 1u);
  EXPECT_THROW(make_overhead_report(Seconds(1), Seconds(0), 1, 1), InvariantError);
}

TEST(EquivalentTokens, Arithmetic) {
  const auto ten = uniform_set(5, 6, 80);
  const std::size_t t600[] = {600};
  EXPECT_EQ(equivalent_token_ratio(ten, t600), 0.1);
  const auto doubled = uniform_set(5, 12, 80);
  EXPECT_EQ(equivalent_token_ratio(doubled, t600), 0.2);

  PrefixSet tiny;
  tiny.agreement = {{{1}, "", Role::kAgreement, {}}};
  tiny.refusal = {{{2}, "", Role::kRefusal, {}}};
  const std::size_t one[] = {1, 1};
  EXPECT_EQ(tiny.total_tokens(), 2u);
  EXPECT_EQ(equivalent_token_ratio(tiny, one), 2.0);
  const std::size_t zero[] = {0};
  EXPECT_THROW(equivalent_token_ratio(tiny, zero), InvariantError);
  EXPECT_THROW(equivalent_token_ratio(tiny, std::span<const std::size_t>{}), InvariantError);
}

TEST(MeasureOverhead, MockMatchesPerProbeClosedForm) {
  SimulatedLatencyProvider::Model model;
  model.fixed_prompt_tokens = 500;
  SimulatedLatencyProvider sim(toy(), model);
  const auto set = uniform_set(5, 6, toy()->model().vocab_size());
  const auto ps = prompts(8);
  const auto r = measure_overhead(sim, ps, set, 3);
  const double closed = (500.0 + 6.0) / 6.0;
  EXPECT_NEAR(r.speedup / closed, 1.0, 0.05);
  EXPECT_NEAR(r.t_no_cache.count(), 10 * 0.506, 1e-9);
  EXPECT_NEAR(r.t_cache.count(), 10 * 0.006, 1e-9);
  EXPECT_EQ(r.c_extra_tokens, 60u);
  EXPECT_EQ(r.t_base_tokens, 500u);
  EXPECT_EQ(r.n_samples, 3u);
  EXPECT_TRUE(r.cache_distinguishable);
  EXPECT_EQ(to_json(r)["status"], "ok");
}

TEST(MeasureOverhead, DegenerateSizes) {
  SimulatedLatencyProvider::Model model;
  model.fixed_prompt_tokens = 1;
  SimulatedLatencyProvider sim(toy(), model);
  PrefixSet set;
  set.agreement = {{{1}, "", Role::kAgreement, {}}};
  set.refusal = {{{2}, "", Role::kRefusal, {}}};
  const auto r = measure_overhead(sim, prompts(2), set, 3);
  EXPECT_EQ(r.c_extra_tokens, 2u);
  EXPECT_EQ(r.ratio, 2.0);
  EXPECT_THROW(measure_overhead(sim, prompts(2), set, 2), InvariantError);
}

TEST(MeasureOverhead, IgnoredCacheHintIsFlagged) {
  SimulatedLatencyProvider::Model model;
  model.ignore_cache_hint = true;
  SimulatedLatencyProvider sim(toy(), model);
  const auto r = measure_overhead(sim, prompts(4), uniform_set(2, 3, 80), 3);
  EXPECT_FALSE(r.cache_distinguishable);
  EXPECT_EQ(to_json(r)["status"], "cache-indistinguishable");
}

// Shifts values of odd-led prefixes slightly when the cache is reused.
class LeakyCache : public LogProbProvider {
 public:
  explicit LeakyCache(std::shared_ptr<const LogProbProvider> inner) : inner_(std::move(inner)) {}
  std::string model_id() const override { return "leaky"; }
  LogProbResult logprobs(const LogProbQuery& q) const override {
    auto r = inner_->logprobs(q);
    if (q.cache_hint == CacheHint::kReuse && q.prefix_tokens.front() % 2 == 1) {
      for (auto& v : r.per_token) v -= 1e-9;
    }
    r.wall_time = std::chrono::milliseconds(1);
    return r;
  }
  std::vector<TokenLogProb> next_token_logprobs(std::string_view p, std::span<const TokenId> t,
                                                CacheHint h) const override {
    return inner_->next_token_logprobs(p, t, h);
  }
  TokenSeq tokenize(std::string_view s) const override { return inner_->tokenize(s); }
  std::string detokenize(std::span<const TokenId> t) const override { return inner_->detokenize(t); }

 private:
  std::shared_ptr<const LogProbProvider> inner_;
};

TEST(MeasureOverhead, ScoreMismatchIsHardError) {
  LeakyCache leaky(toy());
  EXPECT_THROW(measure_overhead(leaky, prompts(3), uniform_set(2, 3, 80), 3), BackendError);
}

TEST(OverheadByPairs, GrowsWithPairsAndLength) {
  SimulatedLatencyProvider::Model model;
  model.fixed_prompt_tokens = 300;
  model.cached_ms_per_token = 0.5;
  SimulatedLatencyProvider sim(toy(), model);
  const auto ps = prompts(4);
  const auto pts = overhead_by_pair_count(sim, ps, uniform_set(5, 4, 80), 3);
  ASSERT_EQ(pts.size(), 5u);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_GE(pts[i].report.t_cache, pts[i - 1].report.t_cache);
    EXPECT_GE(pts[i].report.t_no_cache, pts[i - 1].report.t_no_cache);
  }
  EXPECT_NEAR(pts[4].report.t_cache / pts[0].report.t_cache, 5.0, 1e-9);
  const auto longer = measure_overhead(sim, ps, uniform_set(5, 8, 80), 3);
  EXPECT_NEAR(longer.ratio, 2.0 * pts[4].report.ratio, 1e-12);
  EXPECT_GT(longer.t_cache, pts[4].report.t_cache);
}

TEST(ToyCounters, IdealizedCostModelHoldsExactly) {
  ToyProvider p(synthetic::train(synthetic::standard_suite(), 800, 2));
  const auto set = uniform_set(3, 5, p.model().vocab_size());
  const auto ps = prompts(6);
  std::uint64_t t_base_sum = 0;
  for (const auto& x : ps) t_base_sum += toy_tokenize(x.text).size();
  const std::uint64_t L = set.total_tokens();

  p.clear_cache();
  for (const auto& x : ps) score(p, x, set, {CacheHint::kReuse, 1});  // warm
  p.reset_counters();
  for (const auto& x : ps) score(p, x, set, {CacheHint::kReuse, 1});
  EXPECT_EQ(p.counters().prompt_tokens + p.counters().prefix_tokens, ps.size() * L);

  p.reset_counters();
  for (const auto& x : ps) score(p, x, set, {CacheHint::kBypass, 1});
  EXPECT_EQ(p.counters().prefix_tokens, ps.size() * L);
  EXPECT_EQ(p.counters().prompt_tokens, set.size() * t_base_sum);
}

}  // namespace
}  // namespace prefixprobe
