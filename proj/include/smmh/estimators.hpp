#pragma once

// Leaf-level maximum-likelihood machinery: closed-form Gamma fit, Hawkes
// log-likelihood and Nelder-Mead fit, multi-task GP marginal likelihood with
// analytic gradient and hyperparameter search.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include "smmh/errors.hpp"
#include "smmh/nelder_mead.hpp"
#include "smmh/process_model.hpp"

namespace smmh {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ===========================================================================
// Gamma sojourn / response-time distribution.

class DegenerateDispersionError : public Error {
 public:
  DegenerateDispersionError(const std::string& what, GammaParams fallback)
      : Error(what), fallback_(fallback) {}
  // Near-point-mass fit with the shape capped at 1e6 and the sample mean kept.
  [[nodiscard]] const GammaParams& fallback() const { return fallback_; }

 private:
  GammaParams fallback_;
};

inline constexpr double kGammaShapeCap = 1e6;

// Closed-form fit: v = log(mean) - mean(log x),
// shape = (3 - v + sqrt((v - 3)^2 + 24 v)) / (12 v), scale = mean / shape.
// Optional nonnegative weights give the weighted version.
inline GammaParams fit_gamma_mle(std::span<const double> samples, std::span<const double> weights = {}) {
  if (!weights.empty() && weights.size() != samples.size())
    throw PreconditionError("fit_gamma_mle: one weight per sample required");
  double total = 0.0, sum = 0.0, sum_log = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    if (w < 0.0) throw PreconditionError("fit_gamma_mle: negative weight");
    if (!(samples[i] > 0.0)) throw PreconditionError("fit_gamma_mle: samples must be positive");
    if (w == 0.0) continue;
    total += w;
    sum += w * samples[i];
    sum_log += w * std::log(samples[i]);
    ++used;
  }
  if (used < 2 || !(total > 0.0)) throw PreconditionError("fit_gamma_mle: need >= 2 samples with positive weight");
  const double mean = sum / total;
  const double v = std::log(mean) - sum_log / total;
  if (v <= 1e-12)
    throw DegenerateDispersionError("fit_gamma_mle: samples have no dispersion",
                                    {kGammaShapeCap, mean / kGammaShapeCap});
  const double shape = (3.0 - v + std::sqrt((v - 3.0) * (v - 3.0) + 24.0 * v)) / (12.0 * v);
  return {shape, mean / shape};
}

// As fit_gamma_mle but returns the capped fallback for degenerate data
// (including a single sample) instead of throwing.
inline GammaParams fit_gamma_mle_capped(std::span<const double> samples, std::span<const double> weights = {}) {
  try {
    return fit_gamma_mle(samples, weights);
  } catch (const DegenerateDispersionError& e) {
    return e.fallback();
  } catch (const PreconditionError&) {
    double total = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double w = weights.empty() ? 1.0 : weights[i];
      if (w > 0.0 && samples[i] > 0.0) {
        total += w;
        sum += w * samples[i];
      }
    }
    if (!(total > 0.0)) throw;
    return {kGammaShapeCap, sum / total / kGammaShapeCap};
  }
}

inline double gamma_logpdf(double x, const GammaParams& g) {
  if (!(x > 0.0)) return kNegInf;
  return (g.shape - 1.0) * std::log(x) - x / g.scale - std::lgamma(g.shape) - g.shape * std::log(g.scale);
}

inline double gamma_cdf(double x, const GammaParams& g) {
  if (!(x > 0.0)) return 0.0;
  return boost::math::gamma_p(g.shape, x / g.scale);
}

// log P(S > x), with an asymptotic tail form once the survival underflows.
inline double gamma_logsf(double x, const GammaParams& g) {
  if (!(x > 0.0)) return 0.0;
  const double z = x / g.scale;
  const double q = boost::math::gamma_q(g.shape, z);
  if (q > 0.0) return std::log(q);
  return (g.shape - 1.0) * std::log(z) - z - std::lgamma(g.shape);
}

// log P(lo < S <= hi) for 0 <= lo < hi.
inline double gamma_log_interval(double lo, double hi, const GammaParams& g) {
  const double a = std::max(0.0, lo) / g.scale;
  const double b = hi / g.scale;
  if (!(b > a)) return kNegInf;
  // Use whichever tail keeps the difference well conditioned.
  const double median_z = g.shape;
  double p;
  if (a >= median_z) {
    p = boost::math::gamma_q(g.shape, a) - boost::math::gamma_q(g.shape, b);
  } else {
    p = boost::math::gamma_p(g.shape, b) - boost::math::gamma_p(g.shape, a);
  }
  if (p > 0.0) return std::log(p);
  // Both tails underflowed: approximate by density times width.
  return gamma_logpdf(0.5 * (lo + hi), g) + std::log(hi - lo);
}

inline double gamma_loglik(std::span<const double> samples, std::span<const double> weights, const GammaParams& g) {
  double ll = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    if (w > 0.0) ll += w * gamma_logpdf(samples[i], g);
  }
  return ll;
}

// ===========================================================================
// Hawkes observation process.

// Censoring-correct log-likelihood of event times in [0, window_end] for a
// linear Hawkes process with an empty history at 0:
//   -base T + sum_m (a/b)(exp(-b (T - t_m)) - 1) + sum_m log(base + a A(m)),
//   A(1) = 0, A(m) = exp(-b (t_m - t_{m-1})) (1 + A(m-1)).
// Passing window_end = t_M gives the variant whose compensator stops at the
// last event.
inline double hawkes_loglik(std::span<const double> times, const HawkesParams& hp, double window_end) {
  for (std::size_t m = 0; m < times.size(); ++m) {
    if (m > 0 && times[m] < times[m - 1]) throw PreconditionError("hawkes_loglik: times must be sorted");
    if (times[m] < 0.0 || times[m] > window_end) throw PreconditionError("hawkes_loglik: time outside [0, window_end]");
  }
  if (!(hp.base_rate > 0.0) || !(hp.excitation >= 0.0) || !(hp.decay > 0.0)) return kNegInf;

  const double ratio = hp.excitation / hp.decay;
  double ll = -hp.base_rate * window_end;
  double a = 0.0;
  for (std::size_t m = 0; m < times.size(); ++m) {
    if (m > 0) a = std::exp(-hp.decay * (times[m] - times[m - 1])) * (1.0 + a);
    ll += std::log(hp.base_rate + hp.excitation * a);
    ll += ratio * (std::exp(-hp.decay * (window_end - times[m])) - 1.0);
  }
  return ll;
}

// Event times relative to the segment start, the segment length, and a weight.
struct HawkesSegment {
  std::span<const double> times;
  double window_end = 0.0;
  double weight = 1.0;
};

namespace detail {

inline double weighted_hawkes_loglik(std::span<const HawkesSegment> segments, const HawkesParams& hp, double total) {
  double ll = 0.0;
  for (const auto& s : segments) {
    if (s.weight <= 0.0) continue;
    const double v = hawkes_loglik(s.times, hp, s.window_end);
    if (!std::isfinite(v)) return kNegInf;
    ll += (s.weight / total) * v;
  }
  return ll;
}

}  // namespace detail

// Maximizes the weighted log-likelihood over (base, excitation, decay) with
// Nelder-Mead in log coordinates. The nonstationary region excitation/decay >= 1
// is an infinite penalty. Never returns parameters worse than `init`.
inline HawkesParams fit_hawkes(std::span<const HawkesSegment> segments, const HawkesParams& init,
                               const NelderMeadConfig& cfg = {}) {
  double total = 0.0;
  std::size_t events = 0;
  for (const auto& s : segments) {
    if (s.weight < 0.0) throw PreconditionError("fit_hawkes: negative weight");
    if (s.weight > 0.0) {
      total += s.weight;
      events += s.times.size();
    }
  }
  if (events < 3 || !(total > 0.0)) throw InsufficientDataError("fit_hawkes: need >= 3 events with positive weight");

  auto objective_at = [&](const HawkesParams& hp) {
    if (!(hp.excitation / hp.decay < 1.0)) return std::numeric_limits<double>::infinity();
    return -detail::weighted_hawkes_loglik(segments, hp, total);
  };
  auto from_log = [](const std::vector<double>& x) {
    return HawkesParams{std::exp(x[0]), std::exp(x[1]), std::exp(x[2])};
  };
  auto objective = [&](const std::vector<double>& x) { return objective_at(from_log(x)); };

  HawkesParams start = init;
  if (!(start.base_rate > 0.0)) start.base_rate = 1.0;
  if (!(start.decay > 0.0)) start.decay = 1.0;
  start.excitation = std::max(start.excitation, 1e-4 * start.decay);
  if (!(start.excitation / start.decay < 1.0)) start.excitation = 0.5 * start.decay;

  std::vector<double> x{std::log(start.base_rate), std::log(start.excitation), std::log(start.decay)};
  NelderMeadResult best{x, objective(x), 0, false};
  // Restart from the incumbent until a restart no longer helps.
  for (int restart = 0; restart < 3; ++restart) {
    auto r = nelder_mead(objective, best.argmin, cfg);
    const bool improved = r.value < best.value - 1e-12 * std::max(1.0, std::abs(best.value));
    if (r.value <= best.value) best = r;
    if (!improved) break;
  }
  const HawkesParams fitted = from_log(best.argmin);
  const double init_value = init.base_rate > 0.0 && init.decay > 0.0 ? objective_at(init)
                                                                      : std::numeric_limits<double>::infinity();
  return objective_at(fitted) <= init_value ? fitted : init;
}

// ===========================================================================
// Multi-task GP marks.

// A block of marks observed at (sorted) times, with a weight for EM fits.
struct GpSegment {
  std::span<const double> times;
  std::span<const Eigen::VectorXd> marks;
  std::span<const std::vector<bool>> masks;  // empty = fully observed
  double weight = 1.0;
};

namespace detail {

struct ObservedBlock {
  ObservationLayout layout;
  Eigen::VectorXd values;
};

inline ObservedBlock observed_block(const GpSegment& seg, int channels) {
  ObservedBlock block;
  block.layout = make_layout(seg.masks, static_cast<int>(seg.times.size()), channels);
  block.values.resize(block.layout.size());
  for (int a = 0; a < block.layout.size(); ++a)
    block.values(a) = seg.marks[static_cast<std::size_t>(block.layout.time_index[a])](block.layout.channel[a]);
  return block;
}

// Cholesky of K, escalating an extra diagonal term on failure.
inline Eigen::LLT<Eigen::MatrixXd> robust_llt(Eigen::MatrixXd cov) {
  const double scale = std::max(1e-300, cov.diagonal().cwiseAbs().maxCoeff());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  double extra = 0.0;
  for (int attempt = 0; llt.info() != Eigen::Success; ++attempt) {
    if (attempt >= 8) throw NumericalError("gp: covariance factorization failed after jitter escalation");
    const double next = extra == 0.0 ? 1e-10 * scale : extra * 10.0;
    cov.diagonal().array() += next - extra;
    extra = next;
    llt.compute(cov);
  }
  return llt;
}

inline double gaussian_loglik(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::VectorXd& resid) {
  const Eigen::VectorXd z = llt.matrixL().solve(resid);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * z.squaredNorm() - 0.5 * logdet -
         0.5 * static_cast<double>(resid.size()) * std::log(2.0 * std::numbers::pi);
}

}  // namespace detail

// Log-density of the present mark entries under the state's GP.
inline double gp_marginal_loglik(const GpSegment& seg, const GpParams& gp) {
  const auto block = detail::observed_block(seg, gp.channels());
  if (block.layout.size() == 0) throw PreconditionError("gp_marginal_loglik: no observed values");
  Eigen::VectorXd resid = block.values;
  for (int a = 0; a < block.layout.size(); ++a) resid(a) -= gp.mean(block.layout.channel[a]);
  const auto llt = detail::robust_llt(build_covariance(seg.times, block.layout, gp));
  return detail::gaussian_loglik(llt, resid);
}

inline double gp_marginal_loglik(std::span<const double> times, std::span<const Eigen::VectorXd> marks,
                                 std::span<const std::vector<bool>> masks, const GpParams& gp) {
  return gp_marginal_loglik(GpSegment{times, marks, masks, 1.0}, gp);
}

// Unconstrained coordinates for gradient search over the continuous GP
// hyperparameters: [log length_scale, lower-triangular Cholesky factor of
// channel_cov in row-major order with log-transformed diagonal].
inline Eigen::VectorXd gp_pack(const GpParams& gp) {
  const int q = gp.channels();
  Eigen::MatrixXd cov = gp.channel_cov;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  for (double ridge = 1e-12; llt.info() != Eigen::Success; ridge *= 10.0) {
    cov = gp.channel_cov;
    cov.diagonal().array() += ridge * std::max(1.0, gp.channel_cov.diagonal().maxCoeff());
    llt.compute(cov);
  }
  const Eigen::MatrixXd l = llt.matrixL();
  Eigen::VectorXd phi(1 + q * (q + 1) / 2);
  phi(0) = std::log(gp.length_scale);
  int k = 1;
  for (int r = 0; r < q; ++r)
    for (int g = 0; g <= r; ++g) phi(k++) = r == g ? std::log(l(r, r)) : l(r, g);
  return phi;
}

inline GpParams gp_unpack(const Eigen::VectorXd& phi, GpParams gp) {
  const int q = gp.channels();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
  int k = 1;
  for (int r = 0; r < q; ++r)
    for (int g = 0; g <= r; ++g) l(r, g) = r == g ? std::exp(phi(k++)) : phi(k++);
  gp.length_scale = std::exp(phi(0));
  gp.channel_cov = l * l.transpose();
  return gp;
}

struct GpObjective {
  double loglik = 0.0;      // weighted sum, weights normalized to sum 1
  Eigen::VectorXd gradient;  // d loglik / d gp_pack coordinates
};

namespace detail {

struct FactoredSegment {
  ObservedBlock block;
  Eigen::MatrixXd inverse;
  double logdet = 0.0;
  double weight = 0.0;
  int segment = 0;
};

inline std::vector<FactoredSegment> factor_segments(std::span<const GpSegment> segments, const GpParams& gp,
                                                    double total_weight) {
  std::vector<FactoredSegment> out;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].weight <= 0.0) continue;
    FactoredSegment f;
    f.block = observed_block(segments[s], gp.channels());
    if (f.block.layout.size() == 0) continue;
    const auto llt = robust_llt(build_covariance(segments[s].times, f.block.layout, gp));
    f.inverse = llt.solve(Eigen::MatrixXd::Identity(f.block.layout.size(), f.block.layout.size()));
    f.logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    f.weight = segments[s].weight / total_weight;
    f.segment = static_cast<int>(s);
    out.push_back(std::move(f));
  }
  return out;
}

inline double total_weight(std::span<const GpSegment> segments) {
  double total = 0.0;
  for (const auto& s : segments) total += std::max(0.0, s.weight);
  return total;
}

// Weighted generalized-least-squares mean for a fixed covariance. Channels
// with no observations keep `previous`.
inline Eigen::VectorXd gls_mean(const std::vector<FactoredSegment>& factored, int q, const Eigen::VectorXd& previous) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(q, q);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(q);
  for (const auto& f : factored) {
    const auto& ch = f.block.layout.channel;
    const int n = f.block.layout.size();
    const Eigen::VectorXd kinv_y = f.inverse * f.block.values;
    for (int i = 0; i < n; ++i) {
      b(ch[i]) += f.weight * kinv_y(i);
      for (int j = 0; j < n; ++j) a(ch[i], ch[j]) += f.weight * f.inverse(i, j);
    }
  }
  for (int r = 0; r < q; ++r) {
    if (a(r, r) > 0.0) continue;
    a.row(r).setZero();
    a.col(r).setZero();
    a(r, r) = 1.0;
    b(r) = previous(r);
  }
  return a.ldlt().solve(b);
}

inline double loglik_from_factors(const std::vector<FactoredSegment>& factored, const Eigen::VectorXd& mean) {
  double ll = 0.0;
  for (const auto& f : factored) {
    Eigen::VectorXd resid = f.block.values;
    for (int a = 0; a < resid.size(); ++a) resid(a) -= mean(f.block.layout.channel[a]);
    ll += f.weight * (-0.5 * resid.dot(f.inverse * resid) - 0.5 * f.logdet -
                      0.5 * static_cast<double>(resid.size()) * std::log(2.0 * std::numbers::pi));
  }
  return ll;
}

inline double weighted_gp_loglik(std::span<const GpSegment> segments, const GpParams& gp, double total) {
  double ll = 0.0;
  for (const auto& s : segments) {
    if (s.weight <= 0.0 || s.times.empty()) continue;
    ll += (s.weight / total) * gp_marginal_loglik(s, gp);
  }
  return ll;
}

inline GpObjective gradient_from_factors(std::span<const GpSegment> segments,
                                         const std::vector<FactoredSegment>& factored, const GpParams& gp) {
  const int q = gp.channels();
  GpObjective out;
  out.loglik = loglik_from_factors(factored, gp.mean);
  double d_log_len = 0.0;
  Eigen::MatrixXd g_cov = Eigen::MatrixXd::Zero(q, q);
  for (const auto& f : factored) {
    const auto& seg = segments[static_cast<std::size_t>(f.segment)];
    const auto& lay = f.block.layout;
    const int n = lay.size();
    Eigen::VectorXd resid = f.block.values;
    for (int a = 0; a < n; ++a) resid(a) -= gp.mean(lay.channel[a]);
    const Eigen::VectorXd alpha = f.inverse * resid;
    // d loglik / dK = 0.5 (alpha alpha^T - K^-1)
    for (int a = 0; a < n; ++a) {
      const double ta = seg.times[static_cast<std::size_t>(lay.time_index[a])];
      for (int b = 0; b < n; ++b) {
        const double w = 0.5 * f.weight * (alpha(a) * alpha(b) - f.inverse(a, b));
        const double tb = seg.times[static_cast<std::size_t>(lay.time_index[b])];
        const auto terms = matern_terms(ta - tb, gp.smoothness, gp.length_scale);
        d_log_len += w * gp.channel_cov(lay.channel[a], lay.channel[b]) * terms.log_length_derivative;
        g_cov(lay.channel[a], lay.channel[b]) += w * terms.value;
      }
    }
  }
  // Chain rule through channel_cov = L L^T.
  Eigen::LLT<Eigen::MatrixXd> llt(gp.channel_cov);
  const Eigen::MatrixXd l = llt.matrixL();
  const Eigen::MatrixXd d_l = 2.0 * g_cov * l;
  out.gradient.resize(1 + q * (q + 1) / 2);
  out.gradient(0) = d_log_len;
  int k = 1;
  for (int r = 0; r < q; ++r)
    for (int g = 0; g <= r; ++g) out.gradient(k++) = r == g ? d_l(r, r) * l(r, r) : d_l(r, g);
  return out;
}

}  // namespace detail

// Weighted (weights normalized to sum 1) GP log-likelihood and its analytic
// gradient with respect to the gp_pack coordinates, at fixed mean.
inline GpObjective gp_loglik_gradient(std::span<const GpSegment> segments, const GpParams& gp) {
  const double total = detail::total_weight(segments);
  if (!(total > 0.0)) throw InsufficientDataError("gp_loglik_gradient: no weighted segments");
  const auto factored = detail::factor_segments(segments, gp, total);
  return detail::gradient_from_factors(segments, factored, gp);
}

struct GpFitConfig {
  std::vector<int> smoothness_grid{1, 2, 3};
  int max_iters = 200;
  double tol = 1e-8;  // relative improvement per iteration
};

struct GpFitResult {
  GpParams params;
  double loglik = kNegInf;  // weighted, weights normalized to sum 1
  std::vector<std::pair<int, double>> by_smoothness;
};

namespace detail {

// Alternates the closed-form GLS mean with gradient-ascent steps on the
// covariance hyperparameters; every accepted step increases the objective.
inline GpFitResult ascend_gp(std::span<const GpSegment> segments, GpParams gp, const GpFitConfig& cfg,
                             double total) {
  const int q = gp.channels();
  double step = 0.1;
  double current = kNegInf;
  double sweep_start = kNegInf;
  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    const auto factored = factor_segments(segments, gp, total);
    gp.mean = gls_mean(factored, q, gp.mean);
    const auto obj = gradient_from_factors(segments, factored, gp);
    current = obj.loglik;
    // Progress over a full sweep (mean update plus covariance step).
    if (iter > 0 && current - sweep_start <= cfg.tol * std::max(1.0, std::abs(sweep_start))) break;
    sweep_start = current;

    const Eigen::VectorXd phi = gp_pack(gp);
    const double gnorm = obj.gradient.cwiseAbs().maxCoeff();
    if (!(gnorm > 0.0) || !std::isfinite(gnorm)) break;
    bool accepted = false;
    for (int tries = 0; tries < 40 && !accepted; ++tries) {
      Eigen::VectorXd delta = step * obj.gradient;
      const double biggest = delta.cwiseAbs().maxCoeff();
      if (biggest > 1.0) delta /= biggest;
      const GpParams trial = gp_unpack(phi + delta, gp);
      double value = kNegInf;
      try {
        value = weighted_gp_loglik(segments, trial, total);
      } catch (const NumericalError&) {
      }
      if (std::isfinite(value) && value > current) {
        gp = trial;
        current = value;
        accepted = true;
        step *= 1.5;
      } else {
        step *= 0.5;
      }
    }
    if (!accepted) break;
  }
  const auto factored = factor_segments(segments, gp, total);
  return {gp, loglik_from_factors(factored, gp.mean), {}};
}

}  // namespace detail

// Weighted multi-task GP hyperparameter fit. For each smoothness in the grid
// the continuous hyperparameters are optimized from `init`; the smoothness
// with the highest likelihood wins. The jitter is held fixed during the search
// (init.jitter, or 1e-6 * max(diag) of init.channel_cov when that is zero).
inline GpFitResult fit_gp(std::span<const GpSegment> segments, const GpParams& init, const GpFitConfig& cfg = {}) {
  const double total = detail::total_weight(segments);
  bool enough = false;
  for (const auto& s : segments)
    if (s.weight > 0.0 && detail::observed_block(s, init.channels()).layout.size() >= 2) enough = true;
  if (!enough || !(total > 0.0))
    throw InsufficientDataError("fit_gp: need a weighted segment with >= 2 observations");
  if (cfg.smoothness_grid.empty()) throw PreconditionError("fit_gp: empty smoothness grid");

  GpParams start = init;
  if (!(start.jitter > 0.0)) start.jitter = default_jitter(start.channel_cov);

  GpFitResult best;
  for (int nu : cfg.smoothness_grid) {
    GpParams candidate = start;
    candidate.smoothness = nu;
    auto r = detail::ascend_gp(segments, candidate, cfg, total);
    best.by_smoothness.emplace_back(nu, r.loglik);
    if (r.loglik > best.loglik) {
      best.params = r.params;
      best.loglik = r.loglik;
    }
  }
  return best;
}

}  // namespace smmh
