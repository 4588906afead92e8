#pragma once

// Jump-time estimation by E-divisive change-point detection on the augmented
// observable sequence (marks concatenated with inter-event gaps).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "smmh/errors.hpp"
#include "smmh/process_model.hpp"
#include "smmh/rng.hpp"

namespace smmh {

struct ChangePointConfig {
  double moment_index = 1.0;  // exponent on Euclidean distances, in (0, 2]
  double significance = 0.05;
  int permutations = 199;
  int min_segment = 4;
  bool standardize = true;
  std::uint64_t seed = 0;  // permutation shuffles
};

using Series = std::vector<Eigen::VectorXd>;

// Row m is (y_m, t_m - t_{m-1}) with a zero gap for the first event. Missing
// channels are carried forward; a channel missing at the first event starts
// from its median over the episode (0 if never observed).
inline Series augment(const Episode& ep) {
  if (ep.events.empty()) throw EmptyEpisodeError("augment: episode " + ep.id + " has no events");
  const int q = static_cast<int>(ep.events.front().y.size());

  Eigen::VectorXd start(q);
  for (int r = 0; r < q; ++r) {
    std::vector<double> seen;
    for (const auto& e : ep.events)
      if (e.present(r)) seen.push_back(e.y(r));
    if (seen.empty()) {
      start(r) = 0.0;
      continue;
    }
    std::sort(seen.begin(), seen.end());
    const std::size_t h = seen.size() / 2;
    start(r) = seen.size() % 2 == 1 ? seen[h] : 0.5 * (seen[h - 1] + seen[h]);
  }

  Series out;
  out.reserve(ep.events.size());
  Eigen::VectorXd carried = start;
  for (std::size_t m = 0; m < ep.events.size(); ++m) {
    const auto& e = ep.events[m];
    Eigen::VectorXd row(q + 1);
    for (int r = 0; r < q; ++r) {
      if (e.present(r)) carried(r) = e.y(r);
      row(r) = carried(r);
    }
    row(q) = m == 0 ? 0.0 : e.t - ep.events[m - 1].t;
    out.push_back(std::move(row));
  }
  return out;
}

// Per-dimension z-scores; constant dimensions are only centered.
inline Series standardize(const Series& series) {
  if (series.empty()) return series;
  const auto dim = series.front().size();
  const double n = static_cast<double>(series.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (const auto& x : series) mean += x;
  mean /= n;
  Eigen::VectorXd sd = Eigen::VectorXd::Zero(dim);
  for (const auto& x : series) sd.array() += (x - mean).array().square();
  sd = (sd / n).cwiseSqrt();
  Series out;
  out.reserve(series.size());
  for (const auto& x : series) {
    Eigen::VectorXd z = x - mean;
    for (Eigen::Index k = 0; k < dim; ++k)
      if (sd(k) > 0.0) z(k) /= sd(k);
    out.push_back(std::move(z));
  }
  return out;
}

// Scaled sample energy divergence between two samples:
//   Q = nm/(n+m) * [ 2/(nm) sum |a_i - b_j|^p - C(n,2)^-1 sum_{i<k} |a_i - a_k|^p
//                                            - C(m,2)^-1 sum_{j<l} |b_j - b_l|^p ].
// A within-sample mean is taken as 0 when the sample has a single point.
inline double e_divergence(const Series& a, const Series& b, double moment_index) {
  if (a.empty() || b.empty()) throw PreconditionError("e_divergence: both samples must be nonempty");
  const double n = static_cast<double>(a.size());
  const double m = static_cast<double>(b.size());
  auto dist = [moment_index](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    return std::pow((x - y).norm(), moment_index);
  };
  double between = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) between += dist(x, y);
  auto within = [&](const Series& s) {
    if (s.size() < 2) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t k = i + 1; k < s.size(); ++k) sum += dist(s[i], s[k]);
    const double c = static_cast<double>(s.size());
    return sum / (c * (c - 1.0) / 2.0);
  };
  return (n * m / (n + m)) * (2.0 * between / (n * m) - within(a) - within(b));
}

namespace detail {

struct Split {
  int index = -1;  // first point of the right-hand part, relative to the series
  double statistic = -std::numeric_limits<double>::infinity();
};

// Best split of the points order[lo..hi) given the pairwise distance matrix,
// scanning every admissible boundary in O(len^2) with running sums.
inline Split best_split(const Eigen::MatrixXd& dist, const std::vector<int>& order, int lo, int hi,
                        int min_segment) {
  Split best;
  const int len = hi - lo;
  if (len < 2 * min_segment) return best;

  auto d = [&](int i, int j) { return dist(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]); };

  // Start with the left part = [lo, lo + min_segment).
  const int first = lo + min_segment;
  double left_within = 0.0, right_within = 0.0, between = 0.0;
  for (int i = lo; i < first; ++i)
    for (int k = i + 1; k < first; ++k) left_within += d(i, k);
  for (int j = first; j < hi; ++j)
    for (int l = j + 1; l < hi; ++l) right_within += d(j, l);
  for (int i = lo; i < first; ++i)
    for (int j = first; j < hi; ++j) between += d(i, j);

  for (int tau = first;; ++tau) {
    const double n = tau - lo;
    const double m = hi - tau;
    if (m < min_segment) break;
    const double stat = (n * m / (n + m)) *
                        (2.0 * between / (n * m) - left_within / (n * (n - 1.0) / 2.0) -
                         right_within / (m * (m - 1.0) / 2.0));
    if (stat > best.statistic) best = {tau, stat};
    if (tau + 1 > hi - min_segment) break;
    // Move point tau from the right part to the left part.
    double to_left = 0.0, to_right = 0.0;
    for (int i = lo; i < tau; ++i) to_left += d(i, tau);
    for (int j = tau + 1; j < hi; ++j) to_right += d(tau, j);
    left_within += to_left;
    right_within -= to_right;
    between += to_right - to_left;
  }
  return best;
}

}  // namespace detail

// Divisive bisection: repeatedly take the segment whose best split has the
// largest statistic, keep the split when its permutation p-value is at most
// the significance level, stop at the first rejection. Returned indices are the
// first points of new segments, strictly increasing.
inline std::vector<int> e_divisive(const Series& series, const ChangePointConfig& cfg) {
  if (!(cfg.moment_index > 0.0 && cfg.moment_index <= 2.0))
    throw ParameterError("e_divisive: moment_index must lie in (0, 2]");
  if (!(cfg.significance > 0.0 && cfg.significance < 1.0))
    throw ParameterError("e_divisive: significance must lie in (0, 1)");
  if (cfg.min_segment < 2) throw ParameterError("e_divisive: min_segment must be >= 2");
  const int n = static_cast<int>(series.size());
  std::vector<int> changes;
  if (n < 2 * cfg.min_segment) return changes;

  Eigen::MatrixXd dist(n, n);
  for (int i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (int j = i + 1; j < n; ++j) {
      const double v = std::pow((series[static_cast<std::size_t>(i)] - series[static_cast<std::size_t>(j)]).norm(),
                                cfg.moment_index);
      dist(i, j) = v;
      dist(j, i) = v;
    }
  }

  std::vector<int> identity(static_cast<std::size_t>(n));
  std::iota(identity.begin(), identity.end(), 0);
  Rng rng(cfg.seed);
  std::vector<int> bounds{0, n};

  for (;;) {
    detail::Split best;
    int seg = -1;
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
      const auto s = detail::best_split(dist, identity, bounds[k], bounds[k + 1], cfg.min_segment);
      if (s.index >= 0 && s.statistic > best.statistic) {
        best = s;
        seg = static_cast<int>(k);
      }
    }
    if (seg < 0) break;

    // The observed value is a maximum over segments, so each replicate
    // shuffles within every current segment and takes the same maximum.
    std::vector<int> perm = identity;
    int exceed = 0;
    for (int r = 0; r < cfg.permutations; ++r) {
      double replicate = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
        std::shuffle(perm.begin() + bounds[k], perm.begin() + bounds[k + 1], rng.engine());
        const auto s = detail::best_split(dist, perm, bounds[k], bounds[k + 1], cfg.min_segment);
        if (s.index >= 0) replicate = std::max(replicate, s.statistic);
      }
      if (replicate >= best.statistic) ++exceed;
    }
    const double p_value = (1.0 + exceed) / (1.0 + cfg.permutations);
    if (p_value > cfg.significance) break;

    changes.push_back(best.index);
    bounds.insert(bounds.begin() + seg + 1, best.index);
  }
  std::sort(changes.begin(), changes.end());
  return changes;
}

// Estimated jump times (hours) of one episode. A change at event index m maps
// to the midpoint between events m-1 and m. No detection returns an empty list
// and the whole episode is treated as a single segment downstream.
inline std::vector<double> jump_times(const Episode& ep, const ChangePointConfig& cfg) {
  Series series = augment(ep);
  if (cfg.standardize) series = standardize(series);
  const auto idx = e_divisive(series, cfg);
  std::vector<double> out;
  out.reserve(idx.size());
  for (int m : idx) {
    const auto k = static_cast<std::size_t>(m);
    out.push_back(0.5 * (ep.events[k - 1].t + ep.events[k].t));
  }
  return out;
}

}  // namespace smmh
