#pragma once

// Episode-level discrimination metrics, alarm lead times and the binned
// empirical sampling rate by outcome group.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "smmh/errors.hpp"
#include "smmh/process_model.hpp"
#include "smmh/risk_scorer.hpp"

namespace smmh {

class UndefinedMetricError : public DegenerateDatasetError {
 public:
  using DegenerateDatasetError::DegenerateDatasetError;
};

struct ScoredEpisode {
  double score = 0.0;
  int label = 0;
};

namespace detail {

inline void require_both_classes(std::span<const ScoredEpisode> data, const char* who) {
  bool pos = false, neg = false;
  for (const auto& d : data) (d.label == 1 ? pos : neg) = true;
  if (!pos || !neg) throw UndefinedMetricError(std::string(who) + ": both labels must be present");
}

}  // namespace detail

// Average precision: sum over distinct score thresholds of
// (recall_k - recall_{k-1}) * precision_k, where tied scores enter together.
inline double pr_auc(std::span<const ScoredEpisode> data) {
  detail::require_both_classes(data, "pr_auc");
  std::vector<ScoredEpisode> sorted(data.begin(), data.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double positives = 0.0;
  for (const auto& d : sorted) positives += d.label == 1;
  double tp = 0.0, fp = 0.0, ap = 0.0, last_recall = 0.0;
  for (std::size_t k = 0; k < sorted.size();) {
    std::size_t j = k;
    while (j < sorted.size() && sorted[j].score == sorted[k].score) {
      (sorted[j].label == 1 ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / positives;
    ap += (recall - last_recall) * tp / (tp + fp);
    last_recall = recall;
    k = j;
  }
  return ap;
}

// Probability that a random positive outranks a random negative, ties 1/2.
inline double roc_auc(std::span<const ScoredEpisode> data) {
  detail::require_both_classes(data, "roc_auc");
  std::vector<ScoredEpisode> sorted(data.begin(), data.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
  double negatives_below = 0.0, pos = 0.0, neg = 0.0, wins = 0.0;
  for (std::size_t k = 0; k < sorted.size();) {
    std::size_t j = k;
    double p = 0.0, n = 0.0;
    while (j < sorted.size() && sorted[j].score == sorted[k].score) {
      (sorted[j].label == 1 ? p : n) += 1.0;
      ++j;
    }
    wins += p * negatives_below + 0.5 * p * n;
    negatives_below += n;
    pos += p;
    neg += n;
    k = j;
  }
  return wins / (pos * neg);
}

enum class Aggregation { Max, Final, AtHorizon };

// One score per episode. AtHorizon takes the last score at or before
// `horizon` hours (the first score when none precedes it).
inline double aggregate(const RiskTrace& trace, Aggregation how = Aggregation::Max, double horizon = 0.0) {
  if (trace.scores.empty()) throw PreconditionError("aggregate: empty trace");
  switch (how) {
    case Aggregation::Max:
      return *std::max_element(trace.scores.begin(), trace.scores.end());
    case Aggregation::Final:
      return trace.scores.back();
    case Aggregation::AtHorizon: {
      const auto it = std::upper_bound(trace.times.begin(), trace.times.end(), horizon);
      if (it == trace.times.begin()) return trace.scores.front();
      return trace.scores[static_cast<std::size_t>(it - trace.times.begin() - 1)];
    }
  }
  return trace.scores.back();
}

// Hours between the first score >= threshold and censoring.
inline std::optional<double> alarm_lead_time(const RiskTrace& trace, double threshold, double censor_time) {
  for (std::size_t k = 0; k < trace.scores.size(); ++k)
    if (trace.scores[k] >= threshold) return censor_time - trace.times[k];
  return std::nullopt;
}

struct RateBin {
  double start = 0.0;  // hours before censoring (bin covers [start, start + width))
  double width = 0.0;
  double rate = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int episodes = 0;
  long events = 0;
};

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;  // one-sided, H1: mean(group 1) > mean(group 0)
};

struct SamplingRateReport {
  std::vector<RateBin> group[2];  // indexed by label
  std::optional<WelchResult> final_window_test;
  double test_window = 24.0;
};

// One-sided Welch two-sample t-test of mean(b) > mean(a).
inline WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw PreconditionError("welch_t_test: need >= 2 samples per group");
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  WelchResult r;
  if (!(se2 > 0.0)) {
    r.t = mb > ma ? std::numeric_limits<double>::infinity() : (mb < ma ? -std::numeric_limits<double>::infinity() : 0.0);
    r.df = na + nb - 2.0;
    r.p_value = mb > ma ? 0.0 : (mb < ma ? 1.0 : 0.5);
    return r;
  }
  r.t = (mb - ma) / std::sqrt(se2);
  r.df = se2 * se2 / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  boost::math::students_t dist(r.df);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

// Event rate in bins counted backward from each episode's censor time. An
// episode contributes to a bin only when it spans the whole bin. The CI uses
// the normal approximation to the pooled Poisson count.
inline SamplingRateReport empirical_sampling_rate(std::span<const Episode> episodes, double horizon = 35.0,
                                                  double bin = 1.0, double test_window = 24.0) {
  if (!(horizon > 0.0) || !(bin > 0.0)) throw PreconditionError("empirical_sampling_rate: horizon and bin must be > 0");
  const int n_bins = static_cast<int>(std::ceil(horizon / bin - 1e-9));
  SamplingRateReport rep;
  rep.test_window = test_window;
  for (auto& g : rep.group) {
    g.resize(static_cast<std::size_t>(n_bins));
    for (int k = 0; k < n_bins; ++k) {
      g[static_cast<std::size_t>(k)].start = k * bin;
      g[static_cast<std::size_t>(k)].width = bin;
    }
  }
  std::vector<double> window_rates[2];
  for (const auto& ep : episodes) {
    const int label = ep.label == 1 ? 1 : 0;
    auto& g = rep.group[label];
    for (int k = 0; k < n_bins; ++k) {
      const double hi = (k + 1) * bin;
      if (hi > ep.censor_time + 1e-12) break;
      g[static_cast<std::size_t>(k)].episodes += 1;
    }
    for (const auto& ev : ep.events) {
      const double back = ep.censor_time - ev.t;
      if (back < 0.0) continue;
      const auto k = static_cast<int>(std::floor(back / bin));
      if (k < n_bins && (k + 1) * bin <= ep.censor_time + 1e-12) g[static_cast<std::size_t>(k)].events += 1;
    }
    if (test_window > 0.0 && ep.censor_time >= test_window) {
      long count = 0;
      for (const auto& ev : ep.events)
        if (ep.censor_time - ev.t < test_window) ++count;
      window_rates[label].push_back(static_cast<double>(count) / test_window);
    }
  }
  for (auto& g : rep.group)
    for (auto& b : g) {
      if (b.episodes == 0) continue;
      const double exposure = b.width * b.episodes;
      b.rate = static_cast<double>(b.events) / exposure;
      const double half = 1.959963984540054 * std::sqrt(static_cast<double>(b.events)) / exposure;
      b.ci_low = std::max(0.0, b.rate - half);
      b.ci_high = b.rate + half;
    }
  if (window_rates[0].size() >= 2 && window_rates[1].size() >= 2)
    rep.final_window_test = welch_t_test(window_rates[0], window_rates[1]);
  return rep;
}

}  // namespace smmh
