#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "smmh/smmh.hpp"

namespace smmh::testing {

// Kolmogorov distribution tail P(K > x) (asymptotic series), used with the
// usual small-sample correction of the statistic.
inline double ks_pvalue(std::vector<double> sample, double (*cdf)(double)) {
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  const double x = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * x * x);
  return std::clamp(p, 0.0, 1.0);
}

inline double unit_exp_cdf(double x) { return x <= 0.0 ? 0.0 : 1.0 - std::exp(-x); }

inline Event event(double t, std::vector<double> y) {
  Event e;
  e.t = t;
  e.y = Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  e.mask.assign(y.size(), true);
  return e;
}

inline Episode episode(std::vector<double> times, int q = 1, double censor = -1.0, int label = 0) {
  Episode ep;
  ep.id = "t";
  for (double t : times) ep.events.push_back(event(t, std::vector<double>(static_cast<std::size_t>(q), 0.0)));
  ep.censor_time = censor >= 0.0 ? censor : (times.empty() ? 1.0 : times.back() + 1.0);
  ep.label = label;
  return ep;
}

inline GpParams scalar_gp(double mean, double var, double length_scale = 1.0, int smoothness = 1,
                          double jitter = 0.0) {
  GpParams g;
  g.mean = Eigen::VectorXd::Constant(1, mean);
  g.channel_cov = Eigen::MatrixXd::Constant(1, 1, var);
  g.length_scale = length_scale;
  g.smoothness = smoothness;
  g.jitter = jitter;
  return g;
}

// Three- or four-state models with scalar marks for small hand checks.
inline ModelParams small_model(int n) {
  ModelParams p;
  p.n_states = n;
  p.transition = Eigen::MatrixXd::Zero(n, n);
  p.transition(0, 0) = 1.0;
  p.transition(n - 1, n - 1) = 1.0;
  p.initial = Eigen::VectorXd::Zero(n);
  for (int i = 1; i < n - 1; ++i) {
    p.initial(i) = 1.0 / (n - 2);
    p.transition(i, 0) = 0.4;
    p.transition(i, n - 1) = 0.4;
    if (n == 3) {
      p.transition(i, 0) = 0.5;
      p.transition(i, n - 1) = 0.5;
    } else {
      for (int j = 1; j < n - 1; ++j)
        if (j != i) p.transition(i, j) = 0.2 / (n - 3);
    }
  }
  p.states.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& s = p.states[static_cast<std::size_t>(i)];
    s.gamma = {2.0 + i, 1.5};
    s.hawkes = {0.5 + 0.3 * i, 0.2, 1.0};
    s.gp = scalar_gp(static_cast<double>(i), 1.0, 1.0, 1, 1e-6);
  }
  return p;
}

inline std::vector<Episode> episodes_of(const std::vector<SampledEpisode>& draws) {
  std::vector<Episode> out;
  for (const auto& d : draws) out.push_back(d.episode);
  return out;
}

}  // namespace smmh::testing
