#pragma once

// Generation of synthetic episodes: latent semi-Markov path, Hawkes
// observation times by thinning, and multi-task GP marks.

#include <cassert>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "smmh/errors.hpp"
#include "smmh/process_model.hpp"
#include "smmh/rng.hpp"

namespace smmh {

struct SampleConfig {
  std::uint64_t seed = 0;
  int max_jumps = 200;
  int max_events_per_segment = 10000;
};

namespace detail {

inline void require_valid(const ModelParams& params, const char* who) {
  const auto violations = validate(params);
  if (violations.empty()) return;
  std::string msg = std::string(who) + ": invalid model:";
  for (const auto& v : violations) msg += " [" + v.kind + "] " + v.detail + ";";
  throw ParameterError(msg);
}

}  // namespace detail

// Draws X_1 ~ pi, X_{n+1} ~ P(X_n, .), S_n ~ Gamma(gamma_{X_n}) until the first
// absorbing state; that state's draw is its response time.
inline StatePath sample_state_path(const ModelParams& params, Rng& rng, int max_jumps = 200) {
  StatePath path;
  int state = rng.categorical(params.initial);
  double t = 0.0;
  for (;;) {
    if (static_cast<int>(path.states.size()) >= max_jumps)
      throw RunawayPathError("sample_state_path: no absorption within max_jumps states");
    const auto& g = params.states[static_cast<std::size_t>(state)].gamma;
    const double sojourn = rng.gamma(g.shape, g.scale);
    path.states.push_back(state);
    path.sojourns.push_back(sojourn);
    path.jump_times.push_back(t);
    t += sojourn;
    if (params.is_absorbing(state)) break;
    state = rng.categorical(params.transition.row(state));
  }
  return path;
}

inline StatePath sample_state_path(const ModelParams& params, std::uint64_t seed, int max_jumps = 200) {
  detail::require_valid(params, "sample_state_path");
  Rng rng(seed);
  return sample_state_path(params, rng, max_jumps);
}

// Modified thinning for a linear Hawkes process on [t_start, t_end) with an
// empty history at t_start. Each round: bound = lambda(s+), candidate wait
// ~ Exp(bound), accept when D * bound <= lambda(candidate). The bound is valid
// because the intensity only decays between events. A final candidate that
// overshoots the window is dropped.
inline std::vector<double> thin(const HawkesParams& hp, double t_start, double t_end, Rng& rng,
                                int max_events = 10000) {
  if (t_end < t_start) throw PreconditionError("thin: t_end < t_start");
  if (!(hp.excitation / hp.decay < 1.0)) throw StationarityError("thin: excitation / decay must be < 1");

  const double horizon = t_end - t_start;
  std::vector<double> local;
  double s = 0.0;
  double excite = 0.0;  // sum of exp(-decay (s - tau)) over accepted tau <= s
  while (s < horizon) {
    const double bound = hp.base_rate + hp.excitation * excite;
    const double wait = -std::log(rng.uniform()) / bound;
    s += wait;
    excite *= std::exp(-hp.decay * wait);
    const double lambda_s = hp.base_rate + hp.excitation * excite;
    assert(lambda_s <= bound * (1.0 + 1e-12));
    const double d = rng.uniform();
    if (d * bound <= lambda_s) {
      local.push_back(s);
      excite += 1.0;
      if (static_cast<int>(local.size()) > max_events)
        throw ExplosionError("thin: max_events_per_segment exceeded");
    }
  }
  if (!local.empty() && !(local.back() < horizon)) local.pop_back();

  std::vector<double> out;
  out.reserve(local.size());
  for (double x : local) out.push_back(t_start + x);
  return out;
}

inline std::vector<double> thin(const HawkesParams& hp, double t_start, double t_end, std::uint64_t seed,
                                int max_events = 10000) {
  Rng rng(seed);
  return thin(hp, t_start, t_end, rng, max_events);
}

// One joint draw of the multi-task GP at the given times (all channels).
inline std::vector<Eigen::VectorXd> sample_marks(std::span<const double> times, const GpParams& gp, Rng& rng) {
  const int q = gp.channels();
  std::vector<Eigen::VectorXd> out;
  if (times.empty()) return out;

  Eigen::MatrixXd cov = build_covariance(times, std::span<const std::vector<bool>>{}, gp);
  const int n = static_cast<int>(cov.rows());
  const double scale = std::max(1.0, cov.diagonal().cwiseAbs().maxCoeff());

  // Pivoted LDL^T handles the semidefinite case exactly (a zero-variance
  // channel yields the mean); escalate jitter only for indefinite round-off.
  Eigen::LDLT<Eigen::MatrixXd> ldlt;
  double extra = 0.0;
  for (int attempt = 0;; ++attempt) {
    ldlt.compute(cov);
    if (ldlt.info() == Eigen::Success && ldlt.vectorD().minCoeff() >= -1e-12 * scale) break;
    if (attempt >= 8) throw NumericalError("sample_marks: covariance factorization failed after jitter escalation");
    const double next = extra == 0.0 ? 1e-10 * scale : extra * 10.0;
    cov.diagonal().array() += next - extra;
    extra = next;
  }

  Eigen::VectorXd z(n);
  for (int i = 0; i < n; ++i) z(i) = rng.normal();
  const Eigen::VectorXd sqrt_d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
  Eigen::VectorXd x = ldlt.matrixL() * (sqrt_d.cwiseProduct(z)).eval();
  x = ldlt.transpositionsP().transpose() * x;

  out.reserve(times.size());
  for (std::size_t a = 0; a < times.size(); ++a) {
    Eigen::VectorXd y = gp.mean + x.segment(static_cast<Eigen::Index>(a) * q, q);
    out.push_back(std::move(y));
  }
  return out;
}

inline std::vector<Eigen::VectorXd> sample_marks(std::span<const double> times, const GpParams& gp,
                                                 std::uint64_t seed) {
  Rng rng(seed);
  return sample_marks(times, gp, rng);
}

struct SampledEpisode {
  Episode episode;
  StatePath path;
};

// Full generative loop. Observation times are thinned per segment first and
// the GP is then drawn jointly at the realized times, which is the same
// distribution as drawing the path first. Segment n uses its own RNG streams.
inline SampledEpisode sample_episode(const ModelParams& params, const SampleConfig& cfg, std::string id = {}) {
  detail::require_valid(params, "sample_episode");
  const Rng base(cfg.seed);
  Rng path_rng = base.split(0);
  SampledEpisode out;
  out.path = sample_state_path(params, path_rng, cfg.max_jumps);
  out.episode.id = std::move(id);

  const int q = params.channels();
  for (std::size_t n = 0; n < out.path.size(); ++n) {
    const auto& sp = params.states[static_cast<std::size_t>(out.path.states[n])];
    const double start = out.path.jump_times[n];
    const double end = start + out.path.sojourns[n];
    Rng thin_rng = base.split(1, n);
    Rng mark_rng = base.split(2, n);
    const auto times = thin(sp.hawkes, start, end, thin_rng, cfg.max_events_per_segment);
    const auto marks = sample_marks(times, sp.gp, mark_rng);
    for (std::size_t m = 0; m < times.size(); ++m) {
      // Guard against a zero-length gap created by floating-point offsetting.
      if (!out.episode.events.empty() && !(times[m] > out.episode.events.back().t)) continue;
      out.episode.events.push_back({times[m], marks[m], std::vector<bool>(static_cast<std::size_t>(q), true)});
    }
  }
  out.episode.censor_time = out.path.end_time();
  out.episode.label = out.path.final_state() == params.deteriorating_state() ? 1 : 0;
  return out;
}

inline std::string episode_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ep%06zu", index);
  return buf;
}

// Episode d of a dataset is sampled from seed derive_seed(seed, {d}).
inline std::vector<SampledEpisode> sample_dataset(const ModelParams& params, std::size_t count,
                                                  std::uint64_t seed, SampleConfig cfg = {}) {
  std::vector<SampledEpisode> out;
  out.reserve(count);
  for (std::size_t d = 0; d < count; ++d) {
    cfg.seed = derive_seed(seed, {d});
    out.push_back(sample_episode(params, cfg, episode_id(d)));
  }
  return out;
}

}  // namespace smmh
