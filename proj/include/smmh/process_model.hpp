#pragma once

// Core domain types for the semi-Markov-modulated marked Hawkes process and
// the pure kernel / intensity functions shared by the sampler, the estimators
// and the risk scorer.
//
// Conventions used throughout the library:
//   * time is measured in hours;
//   * states are 0-based in code. State 0 is the stable absorbing state,
//     state N-1 the deteriorating absorbing state, 1..N-2 are transient.
//     Serialized models use 1-based state numbers (see io.hpp).

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smmh/errors.hpp"

namespace smmh {

struct HawkesParams {
  double base_rate = 1.0;   // events/hour
  double excitation = 0.0;  // events/hour
  double decay = 1.0;       // 1/hour

  [[nodiscard]] double branching_ratio() const { return excitation / decay; }
  bool operator==(const HawkesParams&) const = default;
};

// Shape/scale parameterization: mean = shape * scale.
struct GammaParams {
  double shape = 1.0;
  double scale = 1.0;  // hours

  [[nodiscard]] double mean() const { return shape * scale; }
  bool operator==(const GammaParams&) const = default;
};

// Multi-task GP with the intrinsic correlation model: the covariance between
// channel r at time t and channel g at time t' is channel_cov(r, g) * k(|t - t'|).
struct GpParams {
  Eigen::VectorXd mean;         // per-channel constant mean, length Q
  int smoothness = 1;           // Matern order nu in {1, 2, 3, ...}
  double length_scale = 1.0;    // hours
  Eigen::MatrixXd channel_cov;  // Q x Q, symmetric PSD
  double jitter = 0.0;          // added to every covariance diagonal entry

  [[nodiscard]] int channels() const { return static_cast<int>(mean.size()); }
  bool operator==(const GpParams& o) const {
    return mean == o.mean && smoothness == o.smoothness && length_scale == o.length_scale &&
           channel_cov == o.channel_cov && jitter == o.jitter;
  }
};

// 1e-6 * max(diag(channel_cov)).
inline double default_jitter(const Eigen::MatrixXd& channel_cov) {
  if (channel_cov.size() == 0) return 0.0;
  return 1e-6 * std::max(0.0, channel_cov.diagonal().maxCoeff());
}

struct StateParams {
  GammaParams gamma;
  HawkesParams hawkes;
  GpParams gp;
  bool operator==(const StateParams&) const = default;
};

struct ModelParams {
  int n_states = 0;
  Eigen::MatrixXd transition;  // N x N, row-stochastic
  Eigen::VectorXd initial;     // length N
  std::vector<StateParams> states;

  [[nodiscard]] int channels() const { return states.empty() ? 0 : states.front().gp.channels(); }
  [[nodiscard]] int stable_state() const { return 0; }
  [[nodiscard]] int deteriorating_state() const { return n_states - 1; }
  [[nodiscard]] bool is_absorbing(int i) const { return i == 0 || i == n_states - 1; }
  [[nodiscard]] int n_transient() const { return n_states - 2; }

  bool operator==(const ModelParams& o) const {
    return n_states == o.n_states && transition == o.transition && initial == o.initial &&
           states == o.states;
  }
};

struct Event {
  double t = 0.0;
  Eigen::VectorXd y;       // length Q; entries with mask == false are ignored
  std::vector<bool> mask;  // length Q

  [[nodiscard]] bool present(int channel) const { return mask[static_cast<std::size_t>(channel)]; }
  bool operator==(const Event&) const = default;
};

struct Episode {
  std::string id;
  std::vector<Event> events;
  double censor_time = 0.0;  // T_c
  int label = 0;             // 1 = deterioration / ICU, 0 = stable / discharge

  bool operator==(const Episode&) const = default;
};

struct StatePath {
  std::vector<int> states;
  std::vector<double> sojourns;
  std::vector<double> jump_times;

  [[nodiscard]] std::size_t size() const { return states.size(); }
  [[nodiscard]] double end_time() const {
    return states.empty() ? 0.0 : jump_times.back() + sojourns.back();
  }
  [[nodiscard]] int final_state() const { return states.back(); }

  // State occupied at time t (the last segment is closed on the right).
  [[nodiscard]] int state_at(double t) const {
    auto it = std::upper_bound(jump_times.begin(), jump_times.end(), t);
    const auto k = std::max<std::ptrdiff_t>(0, std::distance(jump_times.begin(), it) - 1);
    return states[static_cast<std::size_t>(k)];
  }
  bool operator==(const StatePath&) const = default;
};

// ---------------------------------------------------------------------------
// Matern kernel.
//
// k(d) = (c d / l)^(nu - 1/2) K_{nu - 1/2}(c d / l) / (2^(nu - 3/2) Gamma(nu - 1/2)),
// c = sqrt(2 nu - 1). For integer nu the Bessel order nu - 1/2 is a half
// integer and the kernel has the exact closed form
//   k(r) = exp(-r) * p! / (2p)! * sum_{i=0}^{p} (p + i)! / (i! (p - i)!) (2r)^(p - i),
// with p = nu - 1 and r = c d / l. nu = 1 gives exp(-d / l).

namespace detail {

struct MaternTerms {
  double value;
  double log_length_derivative;  // d k / d log(l)
};

inline MaternTerms matern_terms(double delta, int smoothness, double length_scale) {
  if (!(length_scale > 0.0)) throw ParameterError("matern_kernel: length_scale must be positive");
  if (smoothness < 1) throw ParameterError("matern_kernel: smoothness must be a positive integer");
  const double d = std::abs(delta);
  if (d == 0.0) return {1.0, 0.0};

  const int p = smoothness - 1;
  const double r = std::sqrt(2.0 * smoothness - 1.0) * d / length_scale;
  const double two_r = 2.0 * r;

  // poly(r) = sum_i coef_i (2r)^(p-i); coef_i = p! (p+i)! / ((2p)! i! (p-i)!).
  double poly = 0.0;
  double dpoly = 0.0;
  double lead = std::tgamma(p + 1.0) / std::tgamma(2.0 * p + 1.0);
  for (int i = 0; i <= p; ++i) {
    const double coef =
        lead * std::tgamma(p + i + 1.0) / (std::tgamma(i + 1.0) * std::tgamma(p - i + 1.0));
    const int power = p - i;
    poly += coef * std::pow(two_r, power);
    if (power > 0) dpoly += coef * power * 2.0 * std::pow(two_r, power - 1);
  }
  const double e = std::exp(-r);
  const double value = e * poly;
  const double dk_dr = e * (dpoly - poly);
  // r is proportional to 1/l, so l dk/dl = -r dk/dr.
  return {value, -r * dk_dr};
}

}  // namespace detail

[[nodiscard]] inline double matern_kernel(double delta, int smoothness, double length_scale) {
  return detail::matern_terms(delta, smoothness, length_scale).value;
}

// Flattened (time, channel) index of the present entries of a set of marks,
// time-major then channel order.
struct ObservationLayout {
  std::vector<int> time_index;
  std::vector<int> channel;

  [[nodiscard]] int size() const { return static_cast<int>(time_index.size()); }
};

inline ObservationLayout make_layout(std::span<const std::vector<bool>> masks, int n_times,
                                     int channels) {
  ObservationLayout layout;
  for (int a = 0; a < n_times; ++a) {
    for (int r = 0; r < channels; ++r) {
      const bool present = masks.empty() || masks[static_cast<std::size_t>(a)][static_cast<std::size_t>(r)];
      if (present) {
        layout.time_index.push_back(a);
        layout.channel.push_back(r);
      }
    }
  }
  return layout;
}

inline Eigen::MatrixXd build_covariance(std::span<const double> times, const ObservationLayout& layout,
                                        const GpParams& gp) {
  const int n = layout.size();
  Eigen::MatrixXd cov(n, n);
  for (int a = 0; a < n; ++a) {
    const double ta = times[static_cast<std::size_t>(layout.time_index[a])];
    for (int b = 0; b <= a; ++b) {
      const double tb = times[static_cast<std::size_t>(layout.time_index[b])];
      const double k = matern_kernel(ta - tb, gp.smoothness, gp.length_scale);
      const double v = gp.channel_cov(layout.channel[a], layout.channel[b]) * k;
      cov(a, b) = v;
      cov(b, a) = v;
    }
    cov(a, a) += gp.jitter;
  }
  return cov;
}

// Joint covariance of the present mark entries. An empty mask list means every
// channel is present at every time.
inline Eigen::MatrixXd build_covariance(std::span<const double> times,
                                        std::span<const std::vector<bool>> masks, const GpParams& gp) {
  if (!masks.empty() && masks.size() != times.size())
    throw PreconditionError("build_covariance: one mask per time required");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] < times[i - 1]) throw PreconditionError("build_covariance: times must be nondecreasing");
  const auto layout = make_layout(masks, static_cast<int>(times.size()), gp.channels());
  return build_covariance(times, layout, gp);
}

// ---------------------------------------------------------------------------
// Hawkes observation process.

// lambda(t) = base + excitation * sum_m exp(-decay (t - t_m)) over the events
// since the most recent latent jump. History must lie strictly before t.
[[nodiscard]] inline double hawkes_intensity(double t, std::span<const double> history,
                                             const HawkesParams& hp) {
  double excite = 0.0;
  for (double tm : history) {
    if (!(tm < t)) throw PreconditionError("hawkes_intensity: history event not before t");
    excite += std::exp(-hp.decay * (t - tm));
  }
  return hp.base_rate + hp.excitation * excite;
}

[[nodiscard]] inline double expected_intensity(const HawkesParams& hp) {
  const double ratio = hp.excitation / hp.decay;
  if (!(ratio < 1.0)) throw StationarityError("expected_intensity: excitation / decay must be < 1");
  return hp.base_rate / (1.0 - ratio);
}

// ---------------------------------------------------------------------------
// Validation.

struct Violation {
  std::string kind;
  std::string detail;
};

namespace detail {

inline void validate_state(const StateParams& s, int index, int channels, std::vector<Violation>& out) {
  const std::string where = "state " + std::to_string(index + 1);
  if (!(s.gamma.shape > 0.0) || !(s.gamma.scale > 0.0))
    out.push_back({"gamma", where + ": shape and scale must be positive"});
  const auto& h = s.hawkes;
  if (!(h.base_rate > 0.0)) out.push_back({"hawkes", where + ": base_rate must be positive"});
  if (!(h.excitation >= 0.0)) out.push_back({"hawkes", where + ": excitation must be nonnegative"});
  if (!(h.decay > 0.0)) out.push_back({"hawkes", where + ": decay must be positive"});
  if (h.decay > 0.0 && !(h.excitation / h.decay < 1.0))
    out.push_back({"stationarity", where + ": excitation / decay must be < 1"});

  const auto& gp = s.gp;
  if (gp.channels() != channels || gp.channel_cov.rows() != channels || gp.channel_cov.cols() != channels) {
    out.push_back({"gp", where + ": mean / channel_cov dimensions disagree with Q"});
    return;
  }
  if (gp.smoothness < 1) out.push_back({"gp", where + ": smoothness must be a positive integer"});
  if (!(gp.length_scale > 0.0)) out.push_back({"gp", where + ": length_scale must be positive"});
  if (!(gp.jitter >= 0.0)) out.push_back({"gp", where + ": jitter must be nonnegative"});
  if (!gp.mean.allFinite() || !gp.channel_cov.allFinite()) {
    out.push_back({"gp", where + ": non-finite mean or channel_cov"});
    return;
  }
  const double scale = std::max(1.0, gp.channel_cov.cwiseAbs().maxCoeff());
  if ((gp.channel_cov - gp.channel_cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
    out.push_back({"channel_cov", where + ": channel_cov is not symmetric"});
  } else if (channels > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gp.channel_cov, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-10 * scale)
      out.push_back({"channel_cov", where + ": channel_cov is not positive semidefinite"});
  }
}

}  // namespace detail

// Checks every structural invariant of a parameter bundle and returns all
// violations found (empty means valid).
[[nodiscard]] inline std::vector<Violation> validate(const ModelParams& params) {
  std::vector<Violation> out;
  const int n = params.n_states;
  if (n < 3) {
    out.push_back({"shape", "n_states must be >= 3"});
    return out;
  }
  if (params.transition.rows() != n || params.transition.cols() != n || params.initial.size() != n ||
      static_cast<int>(params.states.size()) != n) {
    out.push_back({"shape", "transition, initial and states must all have N entries"});
    return out;
  }
  const auto& p = params.transition;
  for (int i = 0; i < n; ++i) {
    const std::string row = "row " + std::to_string(i + 1);
    if ((p.row(i).array() < 0.0).any() || !p.row(i).allFinite())
      out.push_back({"transition", row + " has negative or non-finite entries"});
    if (std::abs(p.row(i).sum() - 1.0) > 1e-9) out.push_back({"row-sum", row + " does not sum to 1"});
    if (params.is_absorbing(i)) {
      if (p(i, i) != 1.0) out.push_back({"absorbing", "state " + std::to_string(i + 1) + " must have p_ii = 1"});
    } else if (p(i, i) != 0.0) {
      out.push_back({"transient self-transition", "state " + std::to_string(i + 1) + " has p_ii != 0"});
    }
  }
  if ((params.initial.array() < 0.0).any() || std::abs(params.initial.sum() - 1.0) > 1e-9)
    out.push_back({"initial", "initial distribution must be nonnegative and sum to 1"});

  // Every transient state must reach an absorbing state through positive edges.
  std::vector<bool> reaches(static_cast<std::size_t>(n), false);
  reaches[0] = reaches[static_cast<std::size_t>(n - 1)] = true;
  for (bool changed = true; changed;) {
    changed = false;
    for (int i = 1; i < n - 1; ++i) {
      if (reaches[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < n; ++j) {
        if (p(i, j) > 0.0 && reaches[static_cast<std::size_t>(j)]) {
          reaches[static_cast<std::size_t>(i)] = true;
          changed = true;
          break;
        }
      }
    }
  }
  for (int i = 1; i < n - 1; ++i)
    if (!reaches[static_cast<std::size_t>(i)])
      out.push_back({"reachability", "state " + std::to_string(i + 1) + " cannot reach an absorbing state"});

  const int q = params.channels();
  for (int i = 0; i < n; ++i) detail::validate_state(params.states[static_cast<std::size_t>(i)], i, q, out);
  return out;
}

[[nodiscard]] inline std::vector<Violation> validate_episode(const Episode& ep, int channels) {
  std::vector<Violation> out;
  if (ep.label != 0 && ep.label != 1) out.push_back({"label", ep.id + ": label must be 0 or 1"});
  for (std::size_t m = 0; m < ep.events.size(); ++m) {
    const auto& e = ep.events[m];
    if (!(e.t >= 0.0)) out.push_back({"time", ep.id + ": negative event time"});
    if (m > 0 && !(e.t > ep.events[m - 1].t)) out.push_back({"time", ep.id + ": event times not strictly increasing"});
    if (e.t > ep.censor_time) out.push_back({"time", ep.id + ": event after censor_time"});
    if (e.y.size() != channels || static_cast<int>(e.mask.size()) != channels)
      out.push_back({"channels", ep.id + ": mark dimension differs from model Q"});
  }
  return out;
}

// Helpers shared by several modules.
inline std::vector<double> event_times(const Episode& ep) {
  std::vector<double> t;
  t.reserve(ep.events.size());
  for (const auto& e : ep.events) t.push_back(e.t);
  return t;
}

}  // namespace smmh
