#pragma once

// Binary metrics with harmful as the positive class: confusion counts, F1,
// rank-based ROC-AUC, threshold calibration and the relative capability score.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefixprobe/csv.hpp"
#include "prefixprobe/error.hpp"
#include "prefixprobe/scoring.hpp"

namespace prefixprobe {

struct ScoredLabel {
  double s = 0.0;
  int label = 0;  // 1 = harmful
};

struct LabeledDecision {
  Decision decision;
  std::optional<int> label;
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }

  void add(bool predicted_harmful, int label) {
    if (label == 1) {
      (predicted_harmful ? tp : fn) += 1;
    } else {
      (predicted_harmful ? fp : tn) += 1;
    }
  }

  double precision() const {
    return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  }
  double recall() const {
    return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;  // absent when only one class is present
  std::optional<double> rel_score;
  double tau_used = 0.0;
  std::size_t n = 0;
  ConfusionCounts counts;
};

inline ConfusionCounts confusion_at(std::span<const ScoredLabel> scores, double tau) {
  ConfusionCounts c;
  for (const auto& x : scores) c.add(x.s > tau, x.label);
  return c;
}

inline double f1_at(std::span<const ScoredLabel> scores, double tau) {
  return confusion_at(scores, tau).f1();
}

namespace detail {

inline void check_labels(std::span<const ScoredLabel> scores) {
  for (const auto& x : scores) {
    if (x.label != 0 && x.label != 1) throw InvariantError("label must be 0 or 1");
    if (!std::isfinite(x.s)) throw InvariantError("score must be finite");
  }
}

inline void require_both_classes(std::span<const ScoredLabel> scores) {
  check_labels(scores);
  const auto pos = std::count_if(scores.begin(), scores.end(),
                                 [](const ScoredLabel& x) { return x.label == 1; });
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(scores.size())) {
    throw InvariantError("need at least one harmful and one benign example");
  }
}

inline std::vector<ScoredLabel> sorted_ascending(std::span<const ScoredLabel> scores) {
  std::vector<ScoredLabel> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.s < b.s; });
  return v;
}

}  // namespace detail

// P(random harmful outscores random benign), ties counted 1/2.
inline double auc(std::span<const ScoredLabel> scores) {
  detail::require_both_classes(scores);
  const auto v = detail::sorted_ascending(scores);
  std::uint64_t pos = 0, neg = 0, neg_below = 0;
  // Twice the Mann-Whitney U, kept integral.
  std::uint64_t twice_u = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    std::uint64_t gp = 0, gn = 0;
    while (j < v.size() && v[j].s == v[i].s) {
      (v[j].label == 1 ? gp : gn) += 1;
      ++j;
    }
    twice_u += 2 * gp * neg_below + gp * gn;
    neg_below += gn;
    pos += gp;
    neg += gn;
    i = j;
  }
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

struct Calibration {
  double tau = 0.0;
  double f1 = 0.0;
};

// Sweeps midpoints between consecutive distinct scores plus one threshold
// below and one above every score. Ties in F1 go to the larger threshold.
inline Calibration calibrate(std::span<const ScoredLabel> scores) {
  detail::require_both_classes(scores);
  const auto v = detail::sorted_ascending(scores);
  std::vector<double> distinct;
  for (const auto& x : v) {
    if (distinct.empty() || distinct.back() != x.s) distinct.push_back(x.s);
  }
  std::vector<double> taus;
  taus.reserve(distinct.size() + 1);
  taus.push_back(distinct.front() - std::max(1.0, std::fabs(distinct.front())));
  for (std::size_t i = 0; i + 1 < distinct.size(); ++i) {
    taus.push_back(distinct[i] + (distinct[i + 1] - distinct[i]) / 2.0);
  }
  taus.push_back(distinct.back() + std::max(1.0, std::fabs(distinct.back())));

  // Predicted harmful = scores strictly above tau; walk tau upward.
  std::uint64_t tp = 0, fp = 0, total_pos = 0;
  for (const auto& x : v) {
    if (x.label == 1) {
      ++tp;
      ++total_pos;
    } else {
      ++fp;
    }
  }
  Calibration best{taus.front(), -1.0};
  std::size_t idx = 0;
  for (double tau : taus) {
    while (idx < v.size() && !(v[idx].s > tau)) {
      (v[idx].label == 1 ? tp : fp) -= 1;
      ++idx;
    }
    ConfusionCounts c;
    c.tp = tp;
    c.fp = fp;
    c.fn = total_pos - tp;
    const double f = c.f1();
    if (f >= best.f1) best = {tau, f};
  }
  return best;
}

inline double calibrate_tau(std::span<const ScoredLabel> scores) {
  return calibrate(scores).tau;
}

// m / m_upper; multiply by 100 for display.
inline double rel_score(double m, double m_upper) {
  if (!(m_upper > 0) || !std::isfinite(m_upper)) {
    throw InvariantError("upper-bound F1 must be positive");
  }
  if (!std::isfinite(m)) throw InvariantError("F1 must be finite");
  return m / m_upper;
}

inline MetricsReport f1_at_threshold(std::span<const LabeledDecision> decisions) {
  if (decisions.empty()) throw InvariantError("no decisions to evaluate");
  MetricsReport rep;
  std::vector<ScoredLabel> scored;
  scored.reserve(decisions.size());
  bool tau_set = false;
  for (const auto& d : decisions) {
    if (!d.label) throw InvariantError("unlabeled prompt in evaluation");
    if (*d.label != 0 && *d.label != 1) throw InvariantError("label must be 0 or 1");
    rep.counts.add(d.decision.harmful, *d.label);
    scored.push_back({d.decision.score.s, *d.label});
    if (!tau_set) {
      rep.tau_used = d.decision.tau;
      tau_set = true;
    }
  }
  rep.n = decisions.size();
  rep.precision = rep.counts.precision();
  rep.recall = rep.counts.recall();
  rep.f1 = rep.counts.f1();
  if (rep.counts.tp + rep.counts.fn > 0 && rep.counts.fp + rep.counts.tn > 0) {
    rep.auc = auc(scored);
  }
  return rep;
}

// Thresholds raw scores at `tau` and reports.
inline MetricsReport evaluate_scores(std::span<const ScoredLabel> scores, double tau) {
  std::vector<LabeledDecision> ds;
  ds.reserve(scores.size());
  for (const auto& x : scores) {
    Decision d;
    d.score.s = x.s;
    d.tau = tau;
    d.harmful = x.s > tau;
    ds.push_back({d, x.label});
  }
  return f1_at_threshold(ds);
}

struct RocPoint {
  double threshold;  // predicted harmful iff s >= threshold
  double fpr;
  double tpr;
};

// One point per distinct score, descending, starting at (0, 0).
inline std::vector<RocPoint> roc_curve(std::span<const ScoredLabel> scores) {
  detail::require_both_classes(scores);
  auto v = detail::sorted_ascending(scores);
  std::reverse(v.begin(), v.end());
  double P = 0, N = 0;
  for (const auto& x : v) (x.label == 1 ? P : N) += 1;
  std::vector<RocPoint> pts;
  pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].s == v[i].s) {
      (v[j].label == 1 ? tp : fp) += 1;
      ++j;
    }
    pts.push_back({v[i].s, fp / N, tp / P});
    i = j;
  }
  return pts;
}

struct HistogramBin {
  double lo, hi;
  std::uint64_t benign = 0;
  std::uint64_t harmful = 0;
};

// Equal-width bins over [min, max]; the last bin is closed on the right.
inline std::vector<HistogramBin> class_histogram(std::span<const ScoredLabel> scores,
                                                 std::size_t bins) {
  if (bins == 0) throw InvariantError("histogram needs at least one bin");
  detail::check_labels(scores);
  if (scores.empty()) return {};
  double lo = scores.front().s, hi = scores.front().s;
  for (const auto& x : scores) {
    lo = std::min(lo, x.s);
    hi = std::max(hi, x.s);
  }
  if (lo == hi) bins = 1;
  const double width = lo == hi ? 1.0 : (hi - lo) / static_cast<double>(bins);
  std::vector<HistogramBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = lo + width * static_cast<double>(b);
    out[b].hi = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
  }
  for (const auto& x : scores) {
    auto b = static_cast<std::size_t>((x.s - lo) / width);
    if (b >= bins) b = bins - 1;
    (x.label == 1 ? out[b].harmful : out[b].benign) += 1;
  }
  return out;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["auc"] = r.auc ? nlohmann::ordered_json(*r.auc) : nlohmann::ordered_json(nullptr);
  j["rel_score"] = r.rel_score ? nlohmann::ordered_json(*r.rel_score)
                               : nlohmann::ordered_json(nullptr);
  j["tau_used"] = r.tau_used;
  j["n"] = r.n;
  j["tp"] = r.counts.tp;
  j["fp"] = r.counts.fp;
  j["tn"] = r.counts.tn;
  j["fn"] = r.counts.fn;
  return j;
}

inline constexpr std::string_view kMetricsCsvHeader =
    "precision,recall,f1,auc,rel_score,tau_used,n,tp,fp,tn,fn";

inline std::string metrics_csv_row(const MetricsReport& r) {
  return csv::join({csv::format_double(r.precision), csv::format_double(r.recall),
                    csv::format_double(r.f1), r.auc ? csv::format_double(*r.auc) : "",
                    r.rel_score ? csv::format_double(*r.rel_score) : "",
                    csv::format_double(r.tau_used), std::to_string(r.n),
                    std::to_string(r.counts.tp), std::to_string(r.counts.fp),
                    std::to_string(r.counts.tn), std::to_string(r.counts.fn)});
}

}  // namespace prefixprobe
