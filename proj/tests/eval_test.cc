#include "prefixprobe/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"

namespace prefixprobe {
namespace {

std::vector<ScoredLabel> make(const std::vector<double>& benign,
                              const std::vector<double>& harmful) {
  std::vector<ScoredLabel> out;
  for (double b : benign) out.push_back({b, 0});
  for (double h : harmful) out.push_back({h, 1});
  return out;
}

struct RandomSet {
  std::vector<double> benign, harmful;
  std::vector<ScoredLabel> all() const { return make(benign, harmful); }
};

// Scores on a coarse grid so ties are common.
RandomSet random_set(std::mt19937& rng) {
  RandomSet r;
  const int nb = 1 + static_cast<int>(rng() % 30), nh = 1 + static_cast<int>(rng() % 30);
  for (int i = 0; i < nb; ++i) r.benign.push_back(static_cast<double>(rng() % 21) / 4.0 - 3.0);
  for (int i = 0; i < nh; ++i) r.harmful.push_back(static_cast<double>(rng() % 21) / 4.0 - 2.0);
  return r;
}

TEST(F1, Examples) {
  EXPECT_EQ(f1_at(make({-1, -2}, {1, 2}), 0.0), 1.0);
  ConfusionCounts c;
  c.tp = 8;
  c.fp = 2;
  c.fn = 2;
  EXPECT_NEAR(c.f1(), 0.8, 1e-15);
  EXPECT_EQ(f1_at(make({-1, -2}, {1, 2}), 10.0), 0.0);
}

TEST(Auc, Examples) {
  const auto s = make({0.8}, {0.9, 0.7});
  EXPECT_EQ(auc(s), 0.5);
  EXPECT_EQ(auc(s), oracle::pairwise_auc({0.8}, {0.9, 0.7}));
  EXPECT_EQ(auc(make({-3, -2, -1}, {1, 2})), 1.0);
  EXPECT_EQ(auc(make({1, 1, 1}, {1, 1})), 0.5);
  EXPECT_THROW(auc(make({1, 2}, {})), InvariantError);
}

TEST(Auc, MatchesPairwiseOracle) {
  std::mt19937 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto r = random_set(rng);
    EXPECT_EQ(auc(r.all()), oracle::pairwise_auc(r.benign, r.harmful));
  }
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  std::mt19937 rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto r = random_set(rng);
    auto exp_set = r.all(), affine = r.all();
    for (auto& x : exp_set) x.s = std::exp(x.s);
    for (auto& x : affine) x.s = 3.0 * x.s + 7.0;
    const double base = auc(r.all());
    EXPECT_EQ(auc(exp_set), base);
    EXPECT_EQ(auc(affine), base);
  }
}

TEST(Auc, FlippingLabelsComplements) {
  std::mt19937 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto r = random_set(rng);
    EXPECT_NEAR(auc(make(r.harmful, r.benign)), 1.0 - auc(r.all()), 1e-15);
  }
}

TEST(Calibrate, SeparatedScores) {
  const auto c = calibrate(make({-2, -1}, {1, 2}));
  EXPECT_EQ(c.tau, 0.0);
  EXPECT_EQ(c.f1, 1.0);
}

TEST(Calibrate, TwoPoints) {
  const auto c = calibrate(make({0.0}, {1.0}));
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.f1, 1.0);
}

TEST(Calibrate, MatchesExhaustiveSweep) {
  const auto s = make({-1.0, 0.5, 0.2, 2.0}, {0.1, 1.5, 0.7, -0.3, 3.0});
  EXPECT_DOUBLE_EQ(calibrate(s).f1,
                   oracle::best_f1({-1.0, 0.5, 0.2, 2.0}, {0.1, 1.5, 0.7, -0.3, 3.0}));
  std::mt19937 rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto r = random_set(rng);
    EXPECT_DOUBLE_EQ(calibrate(r.all()).f1, oracle::best_f1(r.benign, r.harmful));
  }
}

TEST(Calibrate, DominatesEveryOtherThreshold) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> tau(-6.0, 6.0);
  for (int i = 0; i < 20; ++i) {
    const auto r = random_set(rng);
    const auto s = r.all();
    const auto c = calibrate(s);
    EXPECT_EQ(f1_at(s, c.tau), c.f1);
    for (int j = 0; j < 100; ++j) EXPECT_GE(c.f1, f1_at(s, tau(rng)));
  }
}

TEST(Calibrate, TiesPreferLargerThreshold) {
  // Any tau in [-1, 1) separates perfectly; the larger midpoint wins.
  const auto c = calibrate(make({-1.0}, {1.0, 2.0}));
  EXPECT_EQ(c.tau, 0.0);
  EXPECT_THROW(calibrate(make({1.0}, {})), InvariantError);
}

TEST(RelScore, PublishedRows) {
  EXPECT_NEAR(rel_score(82.6, 82.9), 0.996, 0.001);
  EXPECT_NEAR(rel_score(86.1, 84.9), 1.014, 0.001);
  EXPECT_THROW(rel_score(80.0, 0.0), InvariantError);
}

TEST(Report, ThresholdAndCounts) {
  const auto r = evaluate_scores(make({-2, -1, 0.5}, {1, 2, -0.5}), 0.0);
  EXPECT_EQ(r.counts.tp, 2u);
  EXPECT_EQ(r.counts.fp, 1u);
  EXPECT_EQ(r.counts.fn, 1u);
  EXPECT_EQ(r.counts.tn, 2u);
  EXPECT_NEAR(r.f1, 2.0 / 3.0, 1e-15);
  ASSERT_TRUE(r.auc.has_value());
  EXPECT_EQ(to_json(r)["n"], 6);
  const auto one_class = evaluate_scores(make({-2, -1}, {}), 0.0);
  EXPECT_FALSE(one_class.auc.has_value());
  EXPECT_TRUE(to_json(one_class)["auc"].is_null());
}

TEST(Report, ScaleInvariance) {
  std::mt19937 rng(6);
  for (int i = 0; i < 20; ++i) {
    const auto r = random_set(rng);
    auto scaled = r.all();
    for (auto& x : scaled) x.s *= 2.5;
    EXPECT_EQ(evaluate_scores(r.all(), 0.5).f1, evaluate_scores(scaled, 1.25).f1);
  }
}

TEST(Roc, EndpointsAndArea) {
  const auto s = make({-1, 0, 0.5}, {0.5, 2});
  const auto pts = roc_curve(s);
  EXPECT_EQ(pts.front().fpr, 0.0);
  EXPECT_EQ(pts.back().fpr, 1.0);
  EXPECT_EQ(pts.back().tpr, 1.0);
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  }
  EXPECT_NEAR(area, auc(s), 1e-15);
}

TEST(Histogram, CountsEveryScore) {
  const auto s = make({-1, -0.9, 0}, {0.5, 1, 1});
  const auto h = class_histogram(s, 4);
  ASSERT_EQ(h.size(), 4u);
  std::uint64_t b = 0, m = 0;
  for (const auto& bin : h) {
    b += bin.benign;
    m += bin.harmful;
  }
  EXPECT_EQ(b, 3u);
  EXPECT_EQ(m, 3u);
  // 0.5 lands on the last bin's lower edge.
  EXPECT_EQ(h.back().harmful, 3u);
  EXPECT_EQ(class_histogram(make({1, 1}, {1}), 5).size(), 1u);
}

}  // namespace
}  // namespace prefixprobe
