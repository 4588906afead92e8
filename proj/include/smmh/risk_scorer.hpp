#pragma once

// Real-time risk: a duration-explicit forward filter over observation epochs
// gives P(X(t) = i | data up to t); the risk is its dot product with the
// embedded-chain absorption probabilities into the deteriorating state.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "smmh/errors.hpp"
#include "smmh/estimators.hpp"
#include "smmh/log_space.hpp"
#include "smmh/parallel.hpp"
#include "smmh/process_model.hpp"

namespace smmh {

struct FilterConfig {
  int max_lookback = 50;  // longest hypothesized current segment, in epochs
  std::optional<std::vector<double>> time_grid;
  bool include_hawkes = false;  // ablation: add observation-time likelihood terms
};

struct RiskTrace {
  std::vector<double> times;
  std::vector<double> scores;
  std::vector<Eigen::VectorXd> posteriors;
};

// a_i = P(eventually absorbed in state N | currently in i), from the embedded
// chain: a_1 = 0, a_N = 1, (I - P_TT) a_T = P_{T,N}.
inline Eigen::VectorXd absorption_prob(const Eigen::MatrixXd& p) {
  const auto n = p.rows();
  if (n < 3 || p.cols() != n) throw PreconditionError("absorption_prob: transition matrix must be N x N with N >= 3");
  const auto nt = n - 2;
  Eigen::VectorXd a = Eigen::VectorXd::Zero(n);
  a(n - 1) = 1.0;
  const Eigen::MatrixXd system = Eigen::MatrixXd::Identity(nt, nt) - p.block(1, 1, nt, nt);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible())
    throw ParameterError("absorption_prob: absorption is unreachable from some transient state (singular system)");
  a.segment(1, nt) = lu.solve(p.block(1, n - 1, nt, 1));
  return a;
}

namespace detail {

// Log-likelihood of the marks y_s..y_m under one state's GP, for every s in
// [lo, m], computed by appending observations newest-first to a Cholesky
// factor. Entry k of the result is for s = m - k.
class ReverseBlockLoglik {
 public:
  ReverseBlockLoglik(std::span<const Event> events, const GpParams& gp) : events_(events), gp_(gp) {}

  std::vector<double> run(int m, int lo) {
    const int q = gp_.channels();
    std::vector<double> out;
    times_.clear();
    chans_.clear();
    v_.clear();
    const int cap = (m - lo + 1) * q;
    l_.setZero(cap, cap);
    double ll = 0.0;
    int k = 0;
    for (int s = m; s >= lo; --s) {
      const auto& ev = events_[static_cast<std::size_t>(s)];
      for (int r = 0; r < q; ++r) {
        if (!ev.present(r)) continue;
        const double resid = ev.y(r) - gp_.mean(r);
        double diag = gp_.channel_cov(r, r) + gp_.jitter;
        double dot_v = 0.0;
        for (int c = 0; c < k; ++c) {
          double cov = gp_.channel_cov(r, chans_[static_cast<std::size_t>(c)]) *
                       matern_kernel(std::abs(ev.t - times_[static_cast<std::size_t>(c)]), gp_.smoothness,
                                     gp_.length_scale);
          for (int j = 0; j < c; ++j) cov -= l_(k, j) * l_(c, j);
          l_(k, c) = cov / l_(c, c);
          diag -= l_(k, c) * l_(k, c);
          dot_v += l_(k, c) * v_[static_cast<std::size_t>(c)];
        }
        const double floor = std::max(gp_.jitter, 1e-12);
        if (!(diag > floor)) diag = floor;
        l_(k, k) = std::sqrt(diag);
        const double v = (resid - dot_v) / l_(k, k);
        v_.push_back(v);
        times_.push_back(ev.t);
        chans_.push_back(r);
        ll += -0.5 * std::log(2.0 * M_PI) - std::log(l_(k, k)) - 0.5 * v * v;
        ++k;
      }
      out.push_back(ll);
    }
    return out;
  }

 private:
  std::span<const Event> events_;
  const GpParams& gp_;
  Eigen::MatrixXd l_;
  std::vector<double> times_;
  std::vector<int> chans_;
  std::vector<double> v_;
};

}  // namespace detail

// Causal filter over an episode's events. Hypotheses at epoch m are
// (state i, start epoch s) for m - max_lookback < s <= m. A segment that
// starts at epoch s > 0 is taken to begin at the midpoint between events s-1
// and s; the first begins at 0. Weights, in log space:
//   entry[s][j]  = log pi_j (s = 0), or
//                  logsum_{i, s'} entry[s'][i] + marks_i(s'..s-1)
//                    + log P(t_{s-1} - b_{s'} < D_i <= t_s - b_{s'}) + log p_ij
//   ongoing(i,s) = entry[s][i] + marks_i(s..m) + log P(D_i > t - b_s)
// Absorbing states never exit; their survival term is the probability that the
// response window has not yet ended.
class ForwardFilter {
 public:
  ForwardFilter(const ModelParams& params, FilterConfig cfg) : params_(params), cfg_(std::move(cfg)) {
    if (cfg_.max_lookback < 1) throw PreconditionError("forward_filter: max_lookback must be >= 1");
    const int n = params_.n_states;
    log_p_.resize(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) log_p_(i, j) = safe_log(params_.transition(i, j));
  }

  // Posterior at every event epoch, or at each grid time when a grid is given.
  RiskTrace run(const Episode& ep) {
    if (ep.events.empty()) throw EmptyEpisodeError("forward_filter: episode has no events");
    const int n = params_.n_states;
    const int total = static_cast<int>(ep.events.size());
    const int cap = cfg_.max_lookback;
    const Eigen::VectorXd absorb = absorption_prob(params_.transition);

    starts_.assign(static_cast<std::size_t>(total), 0.0);
    for (int s = 1; s < total; ++s)
      starts_[static_cast<std::size_t>(s)] =
          0.5 * (ep.events[static_cast<std::size_t>(s - 1)].t + ep.events[static_cast<std::size_t>(s)].t);
    entry_.assign(static_cast<std::size_t>(total), Eigen::VectorXd::Constant(n, kNegInf));
    for (int i = 0; i < n; ++i) entry_[0](i) = safe_log(params_.initial(i));

    std::vector<detail::ReverseBlockLoglik> blocks;
    for (int i = 0; i < n; ++i) blocks.emplace_back(ep.events, params_.states[static_cast<std::size_t>(i)].gp);

    RiskTrace trace;
    std::vector<std::vector<double>> marks(static_cast<std::size_t>(n)), prev_marks;
    int prev_lo = 0;
    std::size_t grid_pos = 0;
    std::vector<double> grid;
    if (cfg_.time_grid) {
      grid = *cfg_.time_grid;
      std::sort(grid.begin(), grid.end());
    }
    auto emit = [&](double t, const Eigen::VectorXd& post) {
      trace.times.push_back(t);
      trace.posteriors.push_back(post);
      trace.scores.push_back(std::clamp(post.dot(absorb), 0.0, 1.0));
    };

    // Grid points before the first event see only the prior.
    while (grid_pos < grid.size() && grid[grid_pos] < ep.events.front().t) {
      Eigen::VectorXd w(n);
      for (int i = 0; i < n; ++i)
        w(i) = entry_[0](i) + gamma_logsf(grid[grid_pos], params_.states[static_cast<std::size_t>(i)].gamma);
      emit(grid[grid_pos++], normalize(w));
    }

    for (int m = 0; m < total; ++m) {
      const double tm = ep.events[static_cast<std::size_t>(m)].t;
      const int lo = std::max(0, m - cap + 1);
      if (m > 0) {
        // Segments that ended between epochs m-1 and m feed entry[m].
        const double tp = ep.events[static_cast<std::size_t>(m - 1)].t;
        std::vector<double> exits(static_cast<std::size_t>(n), kNegInf);
        for (int i = 1; i < n - 1; ++i) {
          std::vector<double> terms;
          for (int s = prev_lo; s <= m - 1; ++s) {
            const double e = entry_[static_cast<std::size_t>(s)](i);
            if (e == kNegInf) continue;
            const double b = starts_[static_cast<std::size_t>(s)];
            terms.push_back(e + prev_marks[static_cast<std::size_t>(i)][static_cast<std::size_t>(m - 1 - s)] +
                            gamma_log_interval(tp - b, tm - b, params_.states[static_cast<std::size_t>(i)].gamma));
          }
          exits[static_cast<std::size_t>(i)] = log_sum_exp(terms);
        }
        for (int j = 0; j < n; ++j) {
          std::vector<double> terms;
          for (int i = 1; i < n - 1; ++i) terms.push_back(exits[static_cast<std::size_t>(i)] + log_p_(i, j));
          entry_[static_cast<std::size_t>(m)](j) = log_sum_exp(terms);
        }
      }

      for (int i = 0; i < n; ++i) {
        marks[static_cast<std::size_t>(i)] = blocks[static_cast<std::size_t>(i)].run(m, lo);
        if (cfg_.include_hawkes) add_hawkes(ep, m, lo, i, marks[static_cast<std::size_t>(i)]);
      }

      if (!cfg_.time_grid) emit(tm, posterior_at(tm, m, lo, marks));

      const double next = m + 1 < total ? ep.events[static_cast<std::size_t>(m + 1)].t
                                        : std::numeric_limits<double>::infinity();
      while (grid_pos < grid.size() && grid[grid_pos] < next) {
        if (grid[grid_pos] >= tm) emit(grid[grid_pos], posterior_between(grid[grid_pos], tm, m, lo, marks));
        ++grid_pos;
      }
      prev_marks = marks;
      prev_lo = lo;
    }

    return trace;
  }

 private:
  static Eigen::VectorXd normalize(const Eigen::VectorXd& log_w) {
    const double z = log_sum_exp(std::vector<double>(log_w.data(), log_w.data() + log_w.size()));
    if (!std::isfinite(z)) throw NumericalError("forward_filter: every hypothesis has zero weight");
    // Scalar exp: Eigen's vectorized exp maps -inf to a denormal, not 0.
    Eigen::VectorXd post(log_w.size());
    for (Eigen::Index i = 0; i < log_w.size(); ++i) post(i) = std::exp(log_w(i) - z);
    return post / post.sum();
  }

  Eigen::VectorXd posterior_at(double t, int m, int lo, const std::vector<std::vector<double>>& marks) const {
    const int n = params_.n_states;
    Eigen::VectorXd w(n);
    for (int i = 0; i < n; ++i) {
      std::vector<double> terms;
      for (int s = lo; s <= m; ++s) {
        const double e = entry_[static_cast<std::size_t>(s)](i);
        if (e == kNegInf) continue;
        terms.push_back(e + marks[static_cast<std::size_t>(i)][static_cast<std::size_t>(m - s)] +
                        gamma_logsf(t - starts_[static_cast<std::size_t>(s)], params_.states[static_cast<std::size_t>(i)].gamma));
      }
      w(i) = log_sum_exp(terms);
    }
    return normalize(w);
  }

  // Between epochs a transient segment may already have ended without a new
  // event; that mass moves one step along the chain.
  Eigen::VectorXd posterior_between(double t, double tm, int m, int lo,
                                    const std::vector<std::vector<double>>& marks) const {
    const int n = params_.n_states;
    Eigen::VectorXd w(n);
    std::vector<double> exits(static_cast<std::size_t>(n), kNegInf);
    for (int i = 0; i < n; ++i) {
      std::vector<double> ongoing, ended;
      const auto& g = params_.states[static_cast<std::size_t>(i)].gamma;
      for (int s = lo; s <= m; ++s) {
        const double e = entry_[static_cast<std::size_t>(s)](i);
        if (e == kNegInf) continue;
        const double base = e + marks[static_cast<std::size_t>(i)][static_cast<std::size_t>(m - s)];
        const double b = starts_[static_cast<std::size_t>(s)];
        ongoing.push_back(base + gamma_logsf(t - b, g));
        if (!params_.is_absorbing(i) && t > tm) ended.push_back(base + gamma_log_interval(tm - b, t - b, g));
      }
      w(i) = log_sum_exp(ongoing);
      exits[static_cast<std::size_t>(i)] = log_sum_exp(ended);
    }
    for (int j = 0; j < n; ++j) {
      std::vector<double> terms{w(j)};
      for (int i = 1; i < n - 1; ++i) terms.push_back(exits[static_cast<std::size_t>(i)] + log_p_(i, j));
      w(j) = log_sum_exp(terms);
    }
    return normalize(w);
  }

  // Hawkes log-likelihood of the events s..m in local time, compensator to t_m.
  void add_hawkes(const Episode& ep, int m, int lo, int i, std::vector<double>& out) const {
    const auto& hp = params_.states[static_cast<std::size_t>(i)].hawkes;
    const double tm = ep.events[static_cast<std::size_t>(m)].t;
    for (int s = lo; s <= m; ++s) {
      const double b = starts_[static_cast<std::size_t>(s)];
      std::vector<double> local;
      for (int k = s; k <= m; ++k) local.push_back(ep.events[static_cast<std::size_t>(k)].t - b);
      out[static_cast<std::size_t>(m - s)] += hawkes_loglik(local, hp, tm - b);
    }
  }

  const ModelParams& params_;
  FilterConfig cfg_;
  Eigen::MatrixXd log_p_;
  std::vector<double> starts_;
  std::vector<Eigen::VectorXd> entry_;
};

// Posterior over states at the time of the last event of `prefix`.
inline Eigen::VectorXd forward_filter(const Episode& prefix, const ModelParams& params, const FilterConfig& cfg = {}) {
  FilterConfig c = cfg;
  c.time_grid.reset();
  return ForwardFilter(params, c).run(prefix).posteriors.back();
}

inline double risk_score(const Eigen::VectorXd& posterior, const Eigen::VectorXd& absorption) {
  return std::clamp(posterior.dot(absorption), 0.0, 1.0);
}

inline double risk_score(const Episode& prefix, const ModelParams& params, const FilterConfig& cfg = {}) {
  return risk_score(forward_filter(prefix, params, cfg), absorption_prob(params.transition));
}

inline RiskTrace score_episode(const Episode& ep, const ModelParams& params, const FilterConfig& cfg = {}) {
  return ForwardFilter(params, cfg).run(ep);
}

inline std::vector<RiskTrace> score_dataset(std::span<const Episode> episodes, const ModelParams& params,
                                            const FilterConfig& cfg = {}) {
  std::vector<RiskTrace> out(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t d) { out[d] = score_episode(episodes[d], params, cfg); });
  return out;
}

}  // namespace smmh
