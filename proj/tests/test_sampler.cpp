#include <gtest/gtest.h>

#include "support.hpp"

using namespace smmh;
using smmh::testing::scalar_gp;
using smmh::testing::small_model;

namespace {

ModelParams one_transient(double p_stable, double p_det) {
  auto p = small_model(4);
  p.initial << 0.0, 1.0, 0.0, 0.0;
  p.transition.row(1) << p_stable, 0.0, 0.0, p_det;
  p.transition.row(2) << 0.5, 0.0, 0.0, 0.5;
  return p;
}

// Compensator of a Hawkes process with empty history at 0, evaluated at t.
double compensator(const std::vector<double>& times, std::size_t upto, double t, const HawkesParams& hp) {
  double c = hp.base_rate * t;
  for (std::size_t j = 0; j < upto; ++j) c += hp.excitation / hp.decay * (1.0 - std::exp(-hp.decay * (t - times[j])));
  return c;
}

}  // namespace

TEST(StatePathSampling, DeterministicKernel) {
  const auto p = one_transient(0.0, 1.0);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto path = sample_state_path(p, s);
    ASSERT_EQ(path.states, (std::vector<int>{1, 3}));
    EXPECT_DOUBLE_EQ(path.jump_times[1], path.sojourns[0]);
  }
}

TEST(StatePathSampling, CoinFlip) {
  const auto p = one_transient(0.5, 0.5);
  int det = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) det += sample_state_path(p, static_cast<std::uint64_t>(s)).final_state() == 3;
  EXPECT_NEAR(det / static_cast<double>(n), 0.5, 0.02);
}

TEST(StatePathSampling, MeanSojournMatchesGamma) {
  const auto p = one_transient(0.5, 0.5);
  double sum = 0.0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) sum += sample_state_path(p, static_cast<std::uint64_t>(s)).sojourns[0];
  const double mean = p.states[1].gamma.mean();
  EXPECT_NEAR(sum / n, mean, 0.03 * mean);
}

TEST(StatePathSampling, PathInvariants) {
  const auto p = reference_model();
  for (std::uint64_t s = 0; s < 500; ++s) {
    const auto path = sample_state_path(p, s);
    ASSERT_TRUE(p.is_absorbing(path.final_state()));
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      EXPECT_FALSE(p.is_absorbing(path.states[k]));
      EXPECT_NE(path.states[k], path.states[k + 1]);
      EXPECT_DOUBLE_EQ(path.jump_times[k + 1], path.jump_times[k] + path.sojourns[k]);
    }
    EXPECT_EQ(path.jump_times.front(), 0.0);
  }
}

TEST(StatePathSampling, RunawayGuard) {
  auto p = small_model(4);
  p.transition.row(1) << 1e-12, 0.0, 1.0 - 2e-12, 1e-12;
  p.transition.row(2) << 1e-12, 1.0 - 2e-12, 0.0, 1e-12;
  EXPECT_THROW(sample_state_path(p, 1, 50), RunawayPathError);
}

TEST(StatePathSampling, RejectsInvalidModel) {
  auto p = small_model(4);
  p.transition(1, 1) = 0.2;
  EXPECT_THROW(sample_state_path(p, 1), ParameterError);
}

TEST(Thinning, PoissonCounts) {
  const int runs = 1000;
  std::vector<double> counts;
  for (int r = 0; r < runs; ++r)
    counts.push_back(static_cast<double>(thin({1.0, 0.0, 3.0}, 0.0, 100.0, static_cast<std::uint64_t>(r)).size()));
  const double mean = std::accumulate(counts.begin(), counts.end(), 0.0) / runs;
  double var = 0.0;
  for (double c : counts) var += (c - mean) * (c - mean);
  var /= runs - 1;
  EXPECT_NEAR(mean, 100.0, 5.0);
  EXPECT_NEAR(var, 100.0, 5.0);
}

TEST(Thinning, ExpectedIntensity) {
  const HawkesParams hp{0.5, 0.8, 2.0};
  double total = 0.0;
  const int runs = 50;
  for (int r = 0; r < runs; ++r) total += static_cast<double>(thin(hp, 0.0, 1000.0, static_cast<std::uint64_t>(r)).size());
  EXPECT_NEAR(total / (runs * 1000.0), 0.8333333, 0.05 * 0.8333333);
}

TEST(Thinning, EmptyWindow) { EXPECT_TRUE(thin({1.0, 0.5, 1.0}, 3.0, 3.0, 7).empty()); }

TEST(Thinning, WindowAndOrdering) {
  const auto t = thin({2.0, 0.5, 1.0}, 10.0, 30.0, 9);
  ASSERT_FALSE(t.empty());
  EXPECT_GE(t.front(), 10.0);
  EXPECT_LT(t.back(), 30.0);
  EXPECT_TRUE(std::is_sorted(t.begin(), t.end()));
}

TEST(Thinning, ExplosionGuard) { EXPECT_THROW(thin({50.0, 0.9, 1.0}, 0.0, 100.0, 3, 100), ExplosionError); }

TEST(Thinning, RejectsNonstationary) { EXPECT_THROW(thin({1.0, 2.0, 1.0}, 0.0, 1.0, 3), StationarityError); }

TEST(Thinning, TimeRescalingIsUnitExponential) {
  const HawkesParams hp{0.5, 0.8, 2.0};
  const auto t = thin(hp, 0.0, 13000.0, 2024, 1000000);
  ASSERT_GT(t.size(), 10000u);
  std::vector<double> gaps;
  double prev = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    // Direct O(k) compensator sums; independent of the sampler's recursion.
    const double at = compensator(t, k, t[k], hp);
    gaps.push_back(at - prev);
    prev = compensator(t, k + 1, t[k], hp);
  }
  EXPECT_GT(smmh::testing::ks_pvalue(gaps, smmh::testing::unit_exp_cdf), 0.01);
}

TEST(Thinning, SameSeedSameTimes) {
  EXPECT_EQ(thin({1.0, 0.5, 1.0}, 0.0, 50.0, 11), thin({1.0, 0.5, 1.0}, 0.0, 50.0, 11));
  EXPECT_NE(thin({1.0, 0.5, 1.0}, 0.0, 50.0, 11), thin({1.0, 0.5, 1.0}, 0.0, 50.0, 12));
}

TEST(Marks, ZeroVarianceIsTheMean) {
  const auto y = sample_marks(std::vector<double>{1.0}, scalar_gp(3.0, 0.0, 1.0, 1, 0.0), 1);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0](0), 3.0);
}

TEST(Marks, MarginalVariance) {
  const auto g = scalar_gp(0.0, 4.0, 1.0, 1, 0.0);
  Rng rng(17);
  double s2 = 0.0;
  const int n = 10000;
  for (int k = 0; k < n; ++k) {
    const double v = sample_marks(std::vector<double>{0.0}, g, rng)[0](0);
    s2 += v * v;
  }
  EXPECT_NEAR(s2 / n, 4.0, 0.2);
}

TEST(Marks, KernelCorrelation) {
  const auto g = scalar_gp(0.0, 1.0, 2.0, 1, 0.0);
  Rng rng(23);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  const int n = 10000;
  for (int k = 0; k < n; ++k) {
    const auto y = sample_marks(std::vector<double>{0.0, 2.0}, g, rng);
    sxy += y[0](0) * y[1](0);
    sxx += y[0](0) * y[0](0);
    syy += y[1](0) * y[1](0);
  }
  EXPECT_NEAR(sxy / std::sqrt(sxx * syy), std::exp(-1.0), 0.02);
}

TEST(Marks, CrossChannelCovariance) {
  GpParams g;
  g.mean = Eigen::Vector2d(1.0, -1.0);
  g.channel_cov.resize(2, 2);
  g.channel_cov << 1.0, 0.6, 0.6, 2.0;
  g.jitter = 0.0;
  Rng rng(29);
  Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    const Eigen::Vector2d d = sample_marks(std::vector<double>{0.0}, g, rng)[0] - g.mean;
    acc += d * d.transpose();
  }
  acc /= n;
  EXPECT_NEAR(acc(0, 1), 0.6, 0.04);
  EXPECT_NEAR(acc(1, 1), 2.0, 0.08);
}

TEST(Episode, ConstructionInvariants) {
  const auto p = reference_model();
  for (std::uint64_t s = 0; s < 200; ++s) {
    SampleConfig cfg;
    cfg.seed = s;
    const auto draw = sample_episode(p, cfg, "x");
    const auto& ep = draw.episode;
    EXPECT_EQ(ep.label, draw.path.final_state() == 3 ? 1 : 0);
    EXPECT_DOUBLE_EQ(ep.censor_time, draw.path.end_time());
    for (std::size_t m = 0; m < ep.events.size(); ++m) {
      EXPECT_GE(ep.events[m].t, 0.0);
      EXPECT_LT(ep.events[m].t, ep.censor_time);
      if (m > 0) EXPECT_GT(ep.events[m].t, ep.events[m - 1].t);
      EXPECT_EQ(ep.events[m].y.size(), 2);
    }
    EXPECT_TRUE(validate_episode(ep, 2).empty());
  }
}

TEST(Episode, DeterministicTwoSegmentPath) {
  const auto p = one_transient(0.0, 1.0);
  SampleConfig cfg;
  cfg.seed = 4;
  const auto d = sample_episode(p, cfg);
  ASSERT_EQ(d.path.size(), 2u);
  for (const auto& e : d.episode.events) EXPECT_LT(e.t, d.episode.censor_time);
}

TEST(Episode, PerStateRatesMatchExpectedIntensity) {
  const auto p = reference_model();
  std::vector<double> events(4, 0.0), time(4, 0.0);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    SampleConfig cfg;
    cfg.seed = derive_seed(99, {s});
    const auto d = sample_episode(p, cfg);
    for (std::size_t k = 0; k < d.path.size(); ++k) {
      const double a = d.path.jump_times[k], b = a + d.path.sojourns[k];
      const auto st = static_cast<std::size_t>(d.path.states[k]);
      time[st] += b - a;
      for (const auto& e : d.episode.events)
        if (e.t >= a && e.t < b) events[st] += 1.0;
    }
  }
  for (int i = 0; i < 4; ++i) {
    // Segments start with an empty history, so the rate sits slightly below
    // the stationary value; the 10% band covers the warm-up.
    const double expected = expected_intensity(p.states[static_cast<std::size_t>(i)].hawkes);
    EXPECT_NEAR(events[static_cast<std::size_t>(i)] / time[static_cast<std::size_t>(i)], expected, 0.1 * expected) << i;
  }
}

TEST(Episode, LabelMatchesFinalStateAlways) {
  const auto data = sample_dataset(reference_model(), 300, 5);
  for (const auto& d : data) EXPECT_EQ(d.episode.label == 1, d.path.final_state() == 3);
}

TEST(Episode, SameSeedSameBytes) {
  const auto a = sample_dataset(reference_model(), 20, 77);
  const auto b = sample_dataset(reference_model(), 20, 77);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(episode_to_json(a[k].episode).dump(), episode_to_json(b[k].episode).dump());
    EXPECT_EQ(a[k].path, b[k].path);
  }
  EXPECT_EQ(a[3].episode.id, "ep000003");
}
