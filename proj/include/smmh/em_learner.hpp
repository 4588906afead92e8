#pragma once

// Offline learning: change-point segmentation, absorbing-state MLE on the
// response-time windows, and segment-level Baum-Welch for the transient
// states, plus BIC model selection over the number of states.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smmh/changepoint.hpp"
#include "smmh/errors.hpp"
#include "smmh/estimators.hpp"
#include "smmh/log_space.hpp"
#include "smmh/nelder_mead.hpp"
#include "smmh/parallel.hpp"
#include "smmh/process_model.hpp"
#include "smmh/rng.hpp"

namespace smmh {

struct Segment {
  double start = 0.0;
  double end = 0.0;
  std::vector<double> local_times;  // event times minus start, in [0, duration)
  std::vector<Eigen::VectorXd> marks;
  std::vector<std::vector<bool>> masks;

  [[nodiscard]] double duration() const { return end - start; }
  [[nodiscard]] std::size_t size() const { return local_times.size(); }

  [[nodiscard]] HawkesSegment hawkes(double weight = 1.0) const { return {local_times, duration(), weight}; }
  [[nodiscard]] GpSegment gp(double weight = 1.0) const { return {local_times, marks, masks, weight}; }
};

struct SegmentedEpisode {
  std::string id;
  std::vector<Segment> segments;  // contiguous, covering [0, censor_time]
  int label = 0;
  double censor_time = 0.0;

  // The last segment is the response-time window of the absorbing state.
  [[nodiscard]] const Segment& absorbing_segment() const { return segments.back(); }
  [[nodiscard]] std::size_t transient_count() const { return segments.size() - 1; }
};

struct SkippedEpisode {
  std::string id;
  std::string reason;
};

struct SegmentationResult {
  std::vector<SegmentedEpisode> episodes;
  std::vector<SkippedEpisode> skipped;
};

struct TrainConfig {
  int n_states = 4;
  int em_iters = 100;
  double loglik_tol = 1e-6;  // relative change that stops EM
  std::uint64_t seed = 0;
  ChangePointConfig changepoint;
  NelderMeadConfig nelder_mead;
  GpFitConfig gp;                   // full GP fits (absorbing states, EM seeding)
  int gp_steps_per_iter = 5;        // gradient steps per EM M-step
  int smoothness_recheck_every = 10;
  int kmeans_restarts = 10;
  bool strict_monotonic = true;     // throw on an EM log-likelihood decrease
};

// Cuts an episode at the given jump times. Cuts outside (0, censor_time) are
// ignored; the final piece is the absorbing segment.
inline SegmentedEpisode segment_episode(const Episode& ep, std::vector<double> cuts) {
  std::sort(cuts.begin(), cuts.end());
  std::vector<double> bounds{0.0};
  for (double c : cuts)
    if (c > bounds.back() && c < ep.censor_time) bounds.push_back(c);
  bounds.push_back(ep.censor_time);

  SegmentedEpisode out;
  out.id = ep.id;
  out.label = ep.label;
  out.censor_time = ep.censor_time;
  std::size_t m = 0;
  for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
    Segment seg;
    seg.start = bounds[k];
    seg.end = bounds[k + 1];
    const bool last = k + 2 == bounds.size();
    while (m < ep.events.size() && (ep.events[m].t < seg.end || (last && ep.events[m].t <= seg.end))) {
      seg.local_times.push_back(ep.events[m].t - seg.start);
      seg.marks.push_back(ep.events[m].y);
      seg.masks.push_back(ep.events[m].mask);
      ++m;
    }
    out.segments.push_back(std::move(seg));
  }
  return out;
}

// Step 1: estimate jump times per episode and cut. Episodes that fail
// detection are reported and skipped.
inline SegmentationResult segment_dataset(std::span<const Episode> episodes, const TrainConfig& cfg) {
  SegmentationResult out;
  std::vector<std::optional<SegmentedEpisode>> done(episodes.size());
  std::vector<std::string> errors(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t d) {
    ChangePointConfig cp = cfg.changepoint;
    cp.seed = derive_seed(cfg.changepoint.seed ^ cfg.seed, {d});
    try {
      done[d] = segment_episode(episodes[d], jump_times(episodes[d], cp));
    } catch (const Error& e) {
      errors[d] = e.what();
    }
  });
  for (std::size_t d = 0; d < episodes.size(); ++d) {
    if (done[d]) {
      out.episodes.push_back(std::move(*done[d]));
    } else {
      out.skipped.push_back({episodes[d].id, errors[d]});
    }
  }
  return out;
}

namespace detail {

// Moment-based GP starting point from weighted segments.
inline GpParams gp_moment_init(std::span<const GpSegment> segments, int q) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(q), count = Eigen::VectorXd::Zero(q);
  std::vector<double> gaps;
  for (const auto& s : segments) {
    if (s.weight <= 0.0) continue;
    for (std::size_t a = 0; a < s.times.size(); ++a) {
      if (a > 0) gaps.push_back(s.times[a] - s.times[a - 1]);
      for (int r = 0; r < q; ++r)
        if (s.masks.empty() || s.masks[a][static_cast<std::size_t>(r)]) {
          sum(r) += s.weight * s.marks[a](r);
          count(r) += s.weight;
        }
    }
  }
  GpParams gp;
  gp.mean = Eigen::VectorXd::Zero(q);
  for (int r = 0; r < q; ++r) gp.mean(r) = count(r) > 0.0 ? sum(r) / count(r) : 0.0;

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(q, q), pairs = Eigen::MatrixXd::Zero(q, q);
  for (const auto& s : segments) {
    if (s.weight <= 0.0) continue;
    for (std::size_t a = 0; a < s.times.size(); ++a)
      for (int r = 0; r < q; ++r)
        for (int g = 0; g < q; ++g) {
          const bool both = s.masks.empty() ||
                            (s.masks[a][static_cast<std::size_t>(r)] && s.masks[a][static_cast<std::size_t>(g)]);
          if (!both) continue;
          cov(r, g) += s.weight * (s.marks[a](r) - gp.mean(r)) * (s.marks[a](g) - gp.mean(g));
          pairs(r, g) += s.weight;
        }
  }
  for (int r = 0; r < q; ++r)
    for (int g = 0; g < q; ++g) cov(r, g) = pairs(r, g) > 0.0 ? cov(r, g) / pairs(r, g) : 0.0;
  for (int r = 0; r < q; ++r)
    if (!(cov(r, r) > 1e-8)) cov(r, r) = 1.0;
  // Shrink correlations slightly so the start is positive definite.
  Eigen::MatrixXd shrunk = 0.9 * cov;
  shrunk.diagonal() = cov.diagonal();
  gp.channel_cov = shrunk;
  if (!gaps.empty()) {
    std::nth_element(gaps.begin(), gaps.begin() + static_cast<std::ptrdiff_t>(gaps.size() / 2), gaps.end());
    gp.length_scale = std::max(0.05, gaps[gaps.size() / 2]);
  }
  gp.smoothness = 1;
  gp.jitter = default_jitter(gp.channel_cov);
  return gp;
}

inline HawkesParams hawkes_moment_init(std::span<const HawkesSegment> segments) {
  double events = 0.0, time = 0.0;
  for (const auto& s : segments) {
    if (s.weight <= 0.0) continue;
    events += s.weight * static_cast<double>(s.times.size());
    time += s.weight * s.window_end;
  }
  const double rate = time > 0.0 && events > 0.0 ? events / time : 0.1;
  return {0.7 * rate, 0.3, 1.0};
}

// Direct weighted MLE of one state's parameters from its segments, with
// fallbacks for data too thin for a particular estimator.
inline StateParams fit_state(std::span<const Segment* const> segments, std::span<const double> weights, int q,
                             const TrainConfig& cfg, std::vector<std::string>* notes, const std::string& name) {
  StateParams sp;
  std::vector<double> durations;
  std::vector<HawkesSegment> hs;
  std::vector<GpSegment> gs;
  for (std::size_t k = 0; k < segments.size(); ++k) {
    durations.push_back(segments[k]->duration());
    hs.push_back(segments[k]->hawkes(weights[k]));
    gs.push_back(segments[k]->gp(weights[k]));
  }
  sp.gamma = fit_gamma_mle_capped(durations, weights);

  const HawkesParams h0 = hawkes_moment_init(hs);
  try {
    sp.hawkes = fit_hawkes(hs, h0, cfg.nelder_mead);
  } catch (const InsufficientDataError&) {
    sp.hawkes = {std::max(1e-3, h0.base_rate / 0.7), 0.0, 1.0};
    if (notes) notes->push_back(name + ": too few events for a Hawkes fit, using the Poisson rate");
  }

  const GpParams g0 = gp_moment_init(gs, q);
  try {
    sp.gp = fit_gp(gs, g0, cfg.gp).params;
  } catch (const InsufficientDataError&) {
    sp.gp = g0;
    if (notes) notes->push_back(name + ": too few marks for a GP fit, using moment estimates");
  }
  return sp;
}

}  // namespace detail

struct AbsorbingFit {
  StateParams stable;         // state 1, fitted on label-0 response windows
  StateParams deteriorating;  // state N, fitted on label-1 response windows
  std::vector<std::string> notes;
};

// Step 2: the absorbing segment of every episode is fully labelled, so the
// absorbing states' Gamma / Hawkes / GP parameters are plain MLEs.
inline AbsorbingFit fit_absorbing(std::span<const SegmentedEpisode> dataset, const TrainConfig& cfg) {
  std::vector<const Segment*> groups[2];
  for (const auto& ep : dataset) groups[ep.label == 1 ? 1 : 0].push_back(&ep.absorbing_segment());
  if (groups[0].empty()) throw DegenerateDatasetError("fit_absorbing: no episodes with label 0 (stable class)");
  if (groups[1].empty()) throw DegenerateDatasetError("fit_absorbing: no episodes with label 1 (deteriorating class)");

  int q = 0;
  for (const auto& ep : dataset)
    for (const auto& s : ep.segments)
      if (!s.marks.empty()) q = static_cast<int>(s.marks.front().size());

  AbsorbingFit out;
  for (int c = 0; c < 2; ++c) {
    const std::vector<double> w(groups[c].size(), 1.0);
    auto sp = detail::fit_state(groups[c], w, q, cfg, &out.notes, c == 0 ? "stable state" : "deteriorating state");
    (c == 0 ? out.stable : out.deteriorating) = std::move(sp);
  }
  return out;
}

// One episode's transient part: every segment but the response window.
struct TransientSequence {
  std::vector<const Segment*> segments;
  int label = 0;
};

inline std::vector<TransientSequence> truncate_to_transient(std::span<const SegmentedEpisode> dataset) {
  std::vector<TransientSequence> out;
  for (const auto& ep : dataset) {
    if (ep.transient_count() == 0) continue;
    TransientSequence seq;
    seq.label = ep.label;
    for (std::size_t s = 0; s + 1 < ep.segments.size(); ++s) seq.segments.push_back(&ep.segments[s]);
    out.push_back(std::move(seq));
  }
  return out;
}

struct BaumWelchInit {
  Eigen::MatrixXd transition;        // N x N
  Eigen::VectorXd initial;           // N
  std::vector<StateParams> transient;  // N - 2
};

struct BaumWelchResult {
  Eigen::MatrixXd transition;
  Eigen::VectorXd initial;
  std::vector<StateParams> transient;
  std::vector<double> loglik_trace;  // observed-data log-likelihood per iteration
  std::vector<std::vector<Eigen::VectorXd>> responsibilities;  // [sequence][segment] over transient states
  std::vector<std::string> warnings;
  int iterations = 0;
};

namespace detail {

inline double segment_emission(const Segment& seg, const StateParams& sp) {
  double e = gamma_logpdf(seg.duration(), sp.gamma) + hawkes_loglik(seg.local_times, sp.hawkes, seg.duration());
  if (!seg.local_times.empty()) {
    try {
      e += gp_marginal_loglik(seg.gp(), sp.gp);
    } catch (const PreconditionError&) {
      // every channel masked: no mark evidence
    }
  }
  return e;
}

struct KMeansResult {
  std::vector<int> assignment;
  double inertia = std::numeric_limits<double>::infinity();
};

inline KMeansResult kmeans(const std::vector<Eigen::VectorXd>& x, int k, int restarts, Rng& rng) {
  KMeansResult best;
  const auto n = x.size();
  if (n == 0) return best;
  for (int rep = 0; rep < restarts; ++rep) {
    // k-means++ seeding.
    std::vector<Eigen::VectorXd> centers;
    centers.push_back(x[static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)) % n]);
    while (static_cast<int>(centers.size()) < k) {
      std::vector<double> d2(n);
      for (std::size_t i = 0; i < n; ++i) {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& c : centers) m = std::min(m, (x[i] - c).squaredNorm());
        d2[i] = m;
      }
      int pick = rng.categorical(d2);
      if (pick < 0) pick = static_cast<int>(rng.uniform() * static_cast<double>(n)) % static_cast<int>(n);
      centers.push_back(x[static_cast<std::size_t>(pick)]);
    }
    std::vector<int> assign(n, 0);
    double inertia = 0.0;
    for (int it = 0; it < 100; ++it) {
      bool changed = false;
      inertia = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        int arg = 0;
        double m = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
          const double d = (x[i] - centers[static_cast<std::size_t>(c)]).squaredNorm();
          if (d < m) {
            m = d;
            arg = c;
          }
        }
        if (assign[i] != arg) changed = true;
        assign[i] = arg;
        inertia += m;
      }
      for (int c = 0; c < k; ++c) {
        Eigen::VectorXd sum = Eigen::VectorXd::Zero(x.front().size());
        int cnt = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (assign[i] == c) {
            sum += x[i];
            ++cnt;
          }
        if (cnt > 0) centers[static_cast<std::size_t>(c)] = sum / cnt;
      }
      if (!changed && it > 0) break;
    }
    if (inertia < best.inertia) best = {assign, inertia};
  }
  return best;
}

// Seeds EM: k-means over (log duration, mean marks, log event rate) of every
// transient segment, then per-cluster direct MLE. Clusters are ordered by
// ascending mean event rate.
inline BaumWelchInit kmeans_init(const std::vector<TransientSequence>& data, int n_transient, int q,
                                 const TrainConfig& cfg, std::vector<std::string>& notes) {
  const int n = n_transient + 2;
  std::vector<const Segment*> all;
  std::vector<std::pair<std::size_t, std::size_t>> where;
  for (std::size_t d = 0; d < data.size(); ++d)
    for (std::size_t s = 0; s < data[d].segments.size(); ++s) {
      all.push_back(data[d].segments[s]);
      where.emplace_back(d, s);
    }

  Eigen::VectorXd global_mean = Eigen::VectorXd::Zero(q), global_cnt = Eigen::VectorXd::Zero(q);
  for (const auto* s : all)
    for (std::size_t a = 0; a < s->size(); ++a)
      for (int r = 0; r < q; ++r)
        if (s->masks[a][static_cast<std::size_t>(r)]) {
          global_mean(r) += s->marks[a](r);
          global_cnt(r) += 1.0;
        }
  for (int r = 0; r < q; ++r) global_mean(r) = global_cnt(r) > 0 ? global_mean(r) / global_cnt(r) : 0.0;

  std::vector<Eigen::VectorXd> feats;
  for (const auto* s : all) {
    Eigen::VectorXd f(q + 2);
    f(0) = std::log(std::max(1e-6, s->duration()));
    for (int r = 0; r < q; ++r) {
      double sum = 0.0, cnt = 0.0;
      for (std::size_t a = 0; a < s->size(); ++a)
        if (s->masks[a][static_cast<std::size_t>(r)]) {
          sum += s->marks[a](r);
          cnt += 1.0;
        }
      f(1 + r) = cnt > 0 ? sum / cnt : global_mean(r);
    }
    f(q + 1) = std::log((static_cast<double>(s->size()) + 0.5) / std::max(1e-6, s->duration()));
    feats.push_back(f);
  }
  // Standardize features.
  if (!feats.empty()) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(q + 2), sd = Eigen::VectorXd::Zero(q + 2);
    for (const auto& f : feats) mu += f;
    mu /= static_cast<double>(feats.size());
    for (const auto& f : feats) sd.array() += (f - mu).array().square();
    sd = (sd / static_cast<double>(feats.size())).cwiseSqrt();
    for (auto& f : feats)
      for (int k = 0; k < q + 2; ++k) f(k) = sd(k) > 0 ? (f(k) - mu(k)) / sd(k) : 0.0;
  }

  Rng rng(derive_seed(cfg.seed, {0x6b6d65616e73ULL}));
  auto km = kmeans(feats, n_transient, cfg.kmeans_restarts, rng);

  // Order clusters by mean event rate.
  std::vector<double> rate(static_cast<std::size_t>(n_transient), 0.0), cnt(static_cast<std::size_t>(n_transient), 0.0);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto c = static_cast<std::size_t>(km.assignment[i]);
    rate[c] += static_cast<double>(all[i]->size()) / std::max(1e-6, all[i]->duration());
    cnt[c] += 1.0;
  }
  std::vector<int> order(static_cast<std::size_t>(n_transient));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double ra = cnt[static_cast<std::size_t>(a)] > 0 ? rate[static_cast<std::size_t>(a)] / cnt[static_cast<std::size_t>(a)] : 0.0;
    const double rb = cnt[static_cast<std::size_t>(b)] > 0 ? rate[static_cast<std::size_t>(b)] / cnt[static_cast<std::size_t>(b)] : 0.0;
    return ra < rb;
  });
  std::vector<int> rank(static_cast<std::size_t>(n_transient));
  for (int k = 0; k < n_transient; ++k) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k;
  for (auto& a : km.assignment) a = rank[static_cast<std::size_t>(a)];

  BaumWelchInit init;
  const std::vector<double> all_w(all.size(), 1.0);
  StateParams global;
  bool have_global = false;
  for (int k = 0; k < n_transient; ++k) {
    std::vector<const Segment*> members;
    for (std::size_t i = 0; i < all.size(); ++i)
      if (km.assignment[i] == k) members.push_back(all[i]);
    if (members.empty()) {
      if (!have_global) {
        global = fit_state(all, all_w, q, cfg, &notes, "pooled transient");
        have_global = true;
      }
      notes.push_back("k-means left transient state " + std::to_string(k + 2) + " empty; seeded from pooled fit");
      init.transient.push_back(global);
      continue;
    }
    const std::vector<double> w(members.size(), 1.0);
    init.transient.push_back(fit_state(members, w, q, cfg, &notes, "transient state " + std::to_string(k + 2)));
  }

  // Transition / initial seeds from hard assignments plus a half pseudo-count.
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd first = Eigen::VectorXd::Constant(n, 0.0);
  for (int k = 0; k < n_transient; ++k) {
    first(k + 1) = 0.5;
    for (int j = 0; j < n; ++j)
      if (j != k + 1) counts(k + 1, j) = 0.5;
  }
  std::size_t idx = 0;
  for (const auto& seq : data) {
    for (std::size_t s = 0; s < seq.segments.size(); ++s, ++idx) {
      const int state = km.assignment[idx] + 1;
      if (s == 0) first(state) += 1.0;
      if (s + 1 < seq.segments.size()) {
        const int next = km.assignment[idx + 1] + 1;
        if (next != state) counts(state, next) += 1.0;
      } else {
        counts(state, seq.label == 1 ? n - 1 : 0) += 1.0;
      }
    }
  }
  init.transition = Eigen::MatrixXd::Zero(n, n);
  init.transition(0, 0) = 1.0;
  init.transition(n - 1, n - 1) = 1.0;
  for (int i = 1; i < n - 1; ++i) init.transition.row(i) = counts.row(i) / counts.row(i).sum();
  init.initial = first / first.sum();
  return init;
}

}  // namespace detail

// Step 3: Baum-Welch over each episode's sequence of transient segments.
// Emission of segment s under transient state i is
//   gamma_logpdf(duration; gamma_i) + hawkes_loglik(times; Lambda_i, duration)
//   + gp_marginal_loglik(marks; Theta_i).
// The backward pass terminates on the probability of moving into the
// episode's observed absorbing state. Self-transitions of transient states
// stay at zero. With a single transient state the sequence has no hidden
// structure; consecutive transient segments are then taken as given.
inline BaumWelchResult baum_welch(const std::vector<TransientSequence>& data, int n_transient, const TrainConfig& cfg,
                                  std::optional<BaumWelchInit> init = std::nullopt) {
  if (n_transient < 1) throw PreconditionError("baum_welch: n_transient must be >= 1");
  if (data.empty()) throw InsufficientDataError("baum_welch: no transient segments");
  const int n = n_transient + 2;
  const int nt = n_transient;
  int q = 0;
  for (const auto& seq : data)
    for (const auto* s : seq.segments)
      if (!s->marks.empty()) q = static_cast<int>(s->marks.front().size());

  BaumWelchResult out;
  if (!init) init = detail::kmeans_init(data, nt, q, cfg, out.warnings);
  if (init->transition.rows() != n || init->initial.size() != n || static_cast<int>(init->transient.size()) != nt)
    throw PreconditionError("baum_welch: initialization has the wrong number of states");

  Eigen::MatrixXd p = init->transition;
  Eigen::VectorXd pi = init->initial;
  std::vector<StateParams> params = init->transient;
  std::vector<bool> frozen(static_cast<std::size_t>(nt), false);

  const std::size_t n_seq = data.size();
  out.responsibilities.resize(n_seq);
  double previous = kNegInf;

  for (int iter = 0; iter < cfg.em_iters; ++iter) {
    // ---- E-step
    Eigen::MatrixXd log_tt(nt, nt);
    Eigen::MatrixXd log_ta(nt, 2);
    for (int i = 0; i < nt; ++i) {
      for (int j = 0; j < nt; ++j) log_tt(i, j) = i == j ? kNegInf : safe_log(p(i + 1, j + 1));
      log_ta(i, 0) = safe_log(p(i + 1, 0));
      log_ta(i, 1) = safe_log(p(i + 1, n - 1));
    }
    if (nt == 1) log_tt(0, 0) = 0.0;
    Eigen::VectorXd log_pi(nt);
    for (int i = 0; i < nt; ++i) log_pi(i) = safe_log(pi(i + 1));

    std::vector<double> seq_ll(n_seq, 0.0);
    std::vector<Eigen::MatrixXd> xi_sum(n_seq);
    parallel_for(n_seq, [&](std::size_t d) {
      const auto& seq = data[d];
      const std::size_t len = seq.segments.size();
      Eigen::MatrixXd em(static_cast<Eigen::Index>(len), nt);
      for (std::size_t s = 0; s < len; ++s)
        for (int i = 0; i < nt; ++i)
          em(static_cast<Eigen::Index>(s), i) = detail::segment_emission(*seq.segments[s], params[static_cast<std::size_t>(i)]);

      Eigen::MatrixXd fwd(static_cast<Eigen::Index>(len), nt), bwd(static_cast<Eigen::Index>(len), nt);
      for (int i = 0; i < nt; ++i) fwd(0, i) = log_pi(i) + em(0, i);
      std::vector<double> tmp(static_cast<std::size_t>(nt));
      for (std::size_t s = 1; s < len; ++s) {
        const auto r = static_cast<Eigen::Index>(s);
        for (int j = 0; j < nt; ++j) {
          for (int i = 0; i < nt; ++i) tmp[static_cast<std::size_t>(i)] = fwd(r - 1, i) + log_tt(i, j);
          fwd(r, j) = log_sum_exp(tmp) + em(r, j);
        }
      }
      const int end_col = seq.label == 1 ? 1 : 0;
      const auto last = static_cast<Eigen::Index>(len - 1);
      for (int i = 0; i < nt; ++i) bwd(last, i) = log_ta(i, end_col);
      for (Eigen::Index r = last - 1; r >= 0; --r) {
        for (int i = 0; i < nt; ++i) {
          for (int j = 0; j < nt; ++j) tmp[static_cast<std::size_t>(j)] = log_tt(i, j) + em(r + 1, j) + bwd(r + 1, j);
          bwd(r, i) = log_sum_exp(tmp);
        }
      }
      for (int i = 0; i < nt; ++i) tmp[static_cast<std::size_t>(i)] = fwd(last, i) + bwd(last, i);
      const double ll = log_sum_exp(tmp);
      seq_ll[d] = ll;

      auto& resp = out.responsibilities[d];
      resp.assign(len, Eigen::VectorXd::Zero(nt));
      Eigen::MatrixXd xi = Eigen::MatrixXd::Zero(nt, nt);
      if (!std::isfinite(ll)) return;
      for (std::size_t s = 0; s < len; ++s) {
        const auto r = static_cast<Eigen::Index>(s);
        for (int i = 0; i < nt; ++i) resp[s](i) = std::exp(fwd(r, i) + bwd(r, i) - ll);
        resp[s] /= resp[s].sum();
        if (s + 1 < len && nt > 1)
          for (int i = 0; i < nt; ++i)
            for (int j = 0; j < nt; ++j)
              if (i != j) xi(i, j) += std::exp(fwd(r, i) + log_tt(i, j) + em(r + 1, j) + bwd(r + 1, j) - ll);
      }
      xi_sum[d] = xi;
    });

    double ll = 0.0;
    for (std::size_t d = 0; d < n_seq; ++d) ll += seq_ll[d];
    if (!std::isfinite(ll)) throw NumericalError("baum_welch: observed-data log-likelihood is not finite");
    out.loglik_trace.push_back(ll);
    out.iterations = iter + 1;
    if (iter > 0) {
      const double change = ll - previous;
      if (cfg.strict_monotonic && change < -1e-6 * std::abs(previous))
        throw ConsistencyError("baum_welch: log-likelihood decreased from " + std::to_string(previous) + " to " +
                               std::to_string(ll));
      if (std::abs(change) <= cfg.loglik_tol * std::abs(previous)) break;
    }
    previous = ll;
    if (iter + 1 == cfg.em_iters) break;  // keep the parameters that produced the last trace entry

    // ---- M-step
    Eigen::VectorXd first = Eigen::VectorXd::Zero(nt);
    Eigen::MatrixXd trans = Eigen::MatrixXd::Zero(nt, nt);
    Eigen::MatrixXd absorb = Eigen::MatrixXd::Zero(nt, 2);
    for (std::size_t d = 0; d < n_seq; ++d) {
      const auto& resp = out.responsibilities[d];
      if (resp.empty()) continue;
      first += resp.front();
      if (xi_sum[d].size() > 0) trans += xi_sum[d];
      absorb.col(data[d].label == 1 ? 1 : 0) += resp.back();
    }
    if (first.sum() > 0.0)
      for (int i = 0; i < nt; ++i) pi(i + 1) = first(i) / first.sum();
    pi(0) = pi(n - 1) = 0.0;
    for (int i = 0; i < nt; ++i) {
      const double row = trans.row(i).sum() + absorb.row(i).sum();
      if (!(row > 1e-12)) continue;
      p.row(i + 1).setZero();
      for (int j = 0; j < nt; ++j)
        if (j != i) p(i + 1, j + 1) = trans(i, j) / row;
      p(i + 1, 0) = absorb(i, 0) / row;
      p(i + 1, n - 1) = absorb(i, 1) / row;
    }

    const bool recheck = cfg.smoothness_recheck_every > 0 && (iter + 1) % cfg.smoothness_recheck_every == 0;
    for (int i = 0; i < nt; ++i) {
      std::vector<double> durations, weights;
      std::vector<HawkesSegment> hs;
      std::vector<GpSegment> gs;
      double mass = 0.0;
      for (std::size_t d = 0; d < n_seq; ++d) {
        const auto& resp = out.responsibilities[d];
        for (std::size_t s = 0; s < resp.size(); ++s) {
          const double w = resp[s](i);
          mass += w;
          if (w < 1e-10) continue;
          const auto* seg = data[d].segments[s];
          durations.push_back(seg->duration());
          weights.push_back(w);
          hs.push_back(seg->hawkes(w));
          gs.push_back(seg->gp(w));
        }
      }
      auto& sp = params[static_cast<std::size_t>(i)];
      if (mass < 1e-8) {
        if (!frozen[static_cast<std::size_t>(i)])
          out.warnings.push_back("state collapse: transient state " + std::to_string(i + 2) +
                                 " lost its responsibility mass; parameters frozen");
        frozen[static_cast<std::size_t>(i)] = true;
        continue;
      }
      frozen[static_cast<std::size_t>(i)] = false;

      const GammaParams g = fit_gamma_mle_capped(durations, weights);
      if (gamma_loglik(durations, weights, g) >= gamma_loglik(durations, weights, sp.gamma)) sp.gamma = g;

      try {
        sp.hawkes = fit_hawkes(hs, sp.hawkes, cfg.nelder_mead);
      } catch (const InsufficientDataError&) {
      }

      GpFitConfig gcfg = cfg.gp;
      gcfg.max_iters = cfg.gp_steps_per_iter;
      if (!recheck) gcfg.smoothness_grid = {sp.gp.smoothness};
      try {
        const double before = detail::weighted_gp_loglik(gs, sp.gp, detail::total_weight(gs));
        auto fitted = fit_gp(gs, sp.gp, gcfg);
        if (fitted.loglik >= before) sp.gp = fitted.params;
      } catch (const InsufficientDataError&) {
      }
    }
  }

  out.transition = p;
  out.initial = pi;
  out.transient = params;
  return out;
}

// ---------------------------------------------------------------------------
// Model selection.

inline double bic(double loglik, double n_params, double n_obs) {
  if (!(n_obs >= 1.0)) throw PreconditionError("bic: n_obs must be >= 1");
  return n_params * std::log(n_obs) - 2.0 * loglik;
}

// Free parameters of an N-state model with Q mark channels:
//   transition: (N-2) transient rows with N-1 admissible entries summing to 1
//               -> (N-2)^2;
//   initial:    N - 1;
//   Gamma:      2 per state; Hawkes: 3 per state;
//   GP:         smoothness + length_scale + Q means + Q(Q+1)/2 covariances.
inline int count_free_parameters(int n_states, int channels) {
  const int n = n_states, q = channels;
  return (n - 2) * (n - 2) + (n - 1) + n * (2 + 3 + 2 + q + q * (q + 1) / 2);
}

struct FitResult {
  ModelParams params;
  std::vector<double> loglik_trace;  // transient-part EM trace
  double loglik = kNegInf;           // EM log-likelihood plus absorbing-window terms
  long n_obs = 0;                    // events used
  std::vector<SkippedEpisode> skipped;
  std::vector<std::string> warnings;
};

// Steps 2 and 3 on an already segmented dataset.
inline FitResult fit_segmented(const SegmentationResult& seg, const TrainConfig& cfg) {
  if (cfg.n_states < 3) throw PreconditionError("fit: n_states must be >= 3");
  if (cfg.em_iters < 1) throw PreconditionError("fit: em_iters must be >= 1");
  FitResult out;
  out.skipped = seg.skipped;
  const auto absorbing = fit_absorbing(seg.episodes, cfg);
  out.warnings = absorbing.notes;

  const int n = cfg.n_states;
  const auto transient = truncate_to_transient(seg.episodes);
  auto bw = baum_welch(transient, n - 2, cfg);
  out.warnings.insert(out.warnings.end(), bw.warnings.begin(), bw.warnings.end());

  ModelParams& mp = out.params;
  mp.n_states = n;
  mp.transition = bw.transition;
  mp.initial = bw.initial;
  mp.states.resize(static_cast<std::size_t>(n));
  mp.states.front() = absorbing.stable;
  mp.states.back() = absorbing.deteriorating;
  for (int i = 0; i < n - 2; ++i) mp.states[static_cast<std::size_t>(i + 1)] = bw.transient[static_cast<std::size_t>(i)];

  const auto violations = validate(mp);
  if (!violations.empty()) {
    std::string msg = "fit: assembled model is invalid:";
    for (const auto& v : violations) msg += " [" + v.kind + "] " + v.detail;
    throw ConsistencyError(msg);
  }

  out.loglik_trace = bw.loglik_trace;
  double ll = bw.loglik_trace.empty() ? 0.0 : bw.loglik_trace.back();
  for (const auto& ep : seg.episodes) {
    const auto& sp = ep.label == 1 ? mp.states.back() : mp.states.front();
    ll += detail::segment_emission(ep.absorbing_segment(), sp);
    for (const auto& s : ep.segments) out.n_obs += static_cast<long>(s.size());
  }
  out.loglik = ll;
  return out;
}

// The full three-step learner.
inline FitResult fit(std::span<const Episode> episodes, const TrainConfig& cfg) {
  bool labels[2] = {false, false};
  for (const auto& ep : episodes) labels[ep.label == 1 ? 1 : 0] = true;
  if (!labels[0] || !labels[1]) throw DegenerateDatasetError("fit: dataset must contain both labels");
  return fit_segmented(segment_dataset(episodes, cfg), cfg);
}

struct BicRow {
  int n_states = 0;
  double loglik = 0.0;
  int n_params = 0;
  long n_obs = 0;
  double bic = 0.0;
};

struct BicSelection {
  std::vector<BicRow> rows;
  std::vector<FitResult> fits;
  std::size_t best = 0;
};

// Fits every state count in the grid on a shared segmentation and keeps the
// BIC minimizer.
inline BicSelection select_by_bic(std::span<const Episode> episodes, TrainConfig cfg, const std::vector<int>& grid) {
  bool labels[2] = {false, false};
  for (const auto& ep : episodes) labels[ep.label == 1 ? 1 : 0] = true;
  if (!labels[0] || !labels[1]) throw DegenerateDatasetError("fit: dataset must contain both labels");
  const auto seg = segment_dataset(episodes, cfg);
  BicSelection out;
  for (int n : grid) {
    cfg.n_states = n;
    auto f = fit_segmented(seg, cfg);
    const int q = f.params.channels();
    BicRow row{n, f.loglik, count_free_parameters(n, q), f.n_obs, 0.0};
    row.bic = bic(row.loglik, row.n_params, static_cast<double>(std::max(1L, row.n_obs)));
    out.rows.push_back(row);
    out.fits.push_back(std::move(f));
  }
  for (std::size_t k = 1; k < out.rows.size(); ++k)
    if (out.rows[k].bic < out.rows[out.best].bic) out.best = k;
  return out;
}

}  // namespace smmh
