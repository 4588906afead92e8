#include <gtest/gtest.h>

#include "support.hpp"

using namespace smmh;
using smmh::testing::event;

namespace {

Series scalar_series(const std::vector<double>& v) {
  Series s;
  for (double x : v) s.push_back(Eigen::VectorXd::Constant(1, x));
  return s;
}

Series shifted_noise(std::uint64_t seed, std::vector<std::pair<int, double>> levels, double sigma) {
  Rng rng(seed);
  Series s;
  for (const auto& [count, mean] : levels)
    for (int k = 0; k < count; ++k) s.push_back(Eigen::VectorXd::Constant(1, mean + sigma * rng.normal()));
  return s;
}

// Three-state model: one transient state whose marks and rate differ
// sharply from the absorbing states.
ModelParams one_transient_model() {
  ModelParams p;
  p.n_states = 3;
  p.transition.resize(3, 3);
  p.transition << 1.0, 0.0, 0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 1.0;
  p.initial = Eigen::Vector3d(0.0, 1.0, 0.0);
  p.states.resize(3);
  p.states[0] = {{6.0, 4.0}, {0.5, 0.1, 1.0}, smmh::testing::scalar_gp(6.0, 1.0, 1.0, 1, 1e-6)};
  p.states[1] = {{6.0, 5.0}, {1.5, 0.1, 1.0}, smmh::testing::scalar_gp(0.0, 1.0, 1.0, 1, 1e-6)};
  p.states[2] = {{6.0, 4.0}, {0.5, 0.1, 1.0}, smmh::testing::scalar_gp(-6.0, 1.0, 1.0, 1, 1e-6)};
  return p;
}

}  // namespace

TEST(Augment, GapColumn) {
  const auto ep = smmh::testing::episode({1.0, 3.0, 6.0});
  const auto s = augment(ep);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0](1), 0.0);
  EXPECT_EQ(s[1](1), 2.0);
  EXPECT_EQ(s[2](1), 3.0);
}

TEST(Augment, SingleEvent) {
  const auto s = augment(smmh::testing::episode({4.0}));
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0](1), 0.0);
}

TEST(Augment, ObservedMarksCopied) {
  Episode ep;
  ep.events = {event(0.5, {1.25, -3.0}), event(2.0, {7.0, 0.125})};
  ep.censor_time = 3.0;
  const auto s = augment(ep);
  EXPECT_EQ(s[0].head(2), Eigen::Vector2d(1.25, -3.0));
  EXPECT_EQ(s[1].head(2), Eigen::Vector2d(7.0, 0.125));
}

TEST(Augment, MissingChannelsCarriedForward) {
  Episode ep;
  ep.events = {event(0.0, {9.0}), event(1.0, {1.0}), event(2.0, {5.0}), event(3.0, {0.0})};
  ep.events[0].mask = {false};  // median of {1, 5} = 3 seeds the first row
  ep.events[3].mask = {false};  // carries 5 forward
  ep.censor_time = 4.0;
  const auto s = augment(ep);
  EXPECT_EQ(s[0](0), 3.0);
  EXPECT_EQ(s[1](0), 1.0);
  EXPECT_EQ(s[3](0), 5.0);
}

TEST(Augment, EmptyEpisodeThrows) {
  Episode ep;
  ep.censor_time = 1.0;
  EXPECT_THROW(augment(ep), EmptyEpisodeError);
}

TEST(EDivergence, IdenticalConstantsGiveZero) {
  const auto c = scalar_series({2.0, 2.0});
  EXPECT_EQ(e_divergence(c, c, 1.0), 0.0);
}

TEST(EDivergence, TwoPointMasses) {
  EXPECT_DOUBLE_EQ(e_divergence(scalar_series({0, 0, 0}), scalar_series({5, 5, 5}), 1.0), 15.0);
}

TEST(EDivergence, SymmetricAndPermutationInvariant) {
  const auto a = shifted_noise(1, {{7, 0.0}}, 1.0);
  const auto b = shifted_noise(2, {{5, 1.0}}, 2.0);
  auto a2 = a;
  std::reverse(a2.begin(), a2.end());
  std::swap(a2[1], a2[4]);
  EXPECT_NEAR(e_divergence(a, b, 1.3), e_divergence(b, a, 1.3), 1e-12);
  EXPECT_NEAR(e_divergence(a, b, 1.3), e_divergence(a2, b, 1.3), 1e-12);
}

TEST(EDivergence, HomogeneousOfDegreeOne) {
  const auto a = shifted_noise(3, {{6, 0.0}}, 1.0);
  const auto b = shifted_noise(4, {{6, 2.0}}, 1.0);
  Series a2, b2;
  for (const auto& x : a) a2.push_back(2.0 * x);
  for (const auto& x : b) b2.push_back(2.0 * x);
  EXPECT_NEAR(e_divergence(a2, b2, 1.0), 2.0 * e_divergence(a, b, 1.0), 1e-10);
}

TEST(EDivisive, ConstantSeriesHasNoChange) {
  EXPECT_TRUE(e_divisive(Series(100, Eigen::VectorXd::Constant(1, 3.0)), {}).empty());
}

TEST(EDivisive, NoiseFreeStep) {
  std::vector<double> v(100, 0.0);
  std::fill(v.begin() + 50, v.end(), 5.0);
  const auto s = scalar_series(v);
  EXPECT_EQ(e_divisive(s, {}), (std::vector<int>{50}));

  // Brute force over every split with the direct statistic.
  int arg = -1;
  double best = -1.0;
  for (int tau = 4; tau <= 96; ++tau) {
    const double q = e_divergence(Series(s.begin(), s.begin() + tau), Series(s.begin() + tau, s.end()), 1.0);
    if (q > best) {
      best = q;
      arg = tau;
    }
  }
  EXPECT_EQ(arg, 50);
}

TEST(EDivisive, TwoShiftsRecovered) {
  int hits = 0;
  for (std::uint64_t r = 0; r < 100; ++r) {
    const auto s = shifted_noise(derive_seed(5, {r}), {{40, 0.0}, {40, 6.0}, {40, -6.0}}, 1.0);
    ChangePointConfig cfg;
    cfg.seed = r;
    const auto idx = e_divisive(s, cfg);
    bool near40 = false, near80 = false;
    for (int m : idx) {
      near40 = near40 || std::abs(m - 40) <= 2;
      near80 = near80 || std::abs(m - 80) <= 2;
    }
    hits += near40 && near80;
  }
  EXPECT_GE(hits, 95);
}

TEST(EDivisive, TinySignificanceNeverRejects) {
  const auto s = shifted_noise(6, {{30, 0.0}, {30, 10.0}}, 1.0);
  ChangePointConfig cfg;
  cfg.significance = 1e-9;
  EXPECT_TRUE(e_divisive(s, cfg).empty());
}

TEST(EDivisive, IndicesIncreasingWithMinSpacing) {
  for (std::uint64_t r = 0; r < 20; ++r) {
    const auto s = shifted_noise(r, {{12, 0.0}, {6, 4.0}, {9, -3.0}, {15, 2.0}}, 0.7);
    ChangePointConfig cfg;
    cfg.min_segment = 5;
    cfg.seed = r;
    const auto idx = e_divisive(s, cfg);
    int prev = 0;
    for (int m : idx) {
      EXPECT_GE(m - prev, cfg.min_segment);
      prev = m;
    }
    EXPECT_GE(static_cast<int>(s.size()) - prev, cfg.min_segment);
  }
}

TEST(EDivisive, ShortSeriesReturnsEmpty) {
  EXPECT_TRUE(e_divisive(scalar_series({0, 0, 0, 9, 9, 9, 9}), {}).empty());
}

TEST(EDivisive, RejectsBadConfig) {
  ChangePointConfig cfg;
  cfg.moment_index = 2.5;
  EXPECT_THROW(e_divisive(scalar_series({1, 2}), cfg), ParameterError);
  cfg = {};
  cfg.significance = 1.0;
  EXPECT_THROW(e_divisive(scalar_series({1, 2}), cfg), ParameterError);
}

TEST(EDivisive, StandardizationInvariance) {
  for (std::uint64_t r = 0; r < 10; ++r) {
    Rng rng(r);
    Series s;
    for (int k = 0; k < 60; ++k) {
      Eigen::Vector2d x(rng.normal() + (k >= 25 ? 3.0 : 0.0), rng.normal());
      s.push_back(x);
    }
    Series t;
    for (const auto& x : s) t.push_back(Eigen::Vector2d(100.0 * x(0) - 7.0, 0.01 * x(1) + 4.0));
    ChangePointConfig cfg;
    cfg.seed = r;
    EXPECT_EQ(e_divisive(standardize(s), cfg), e_divisive(standardize(t), cfg));
  }
}

TEST(JumpTimes, MidpointRule) {
  Episode ep;
  for (int k = 0; k < 6; ++k) ep.events.push_back(event(k, {k < 3 ? 0.0 : 50.0}));
  ep.censor_time = 6.0;
  ChangePointConfig cfg;
  cfg.min_segment = 3;
  cfg.standardize = false;
  cfg.significance = 0.2;  // 2 of the 20 arrangements reach the observed statistic
  cfg.permutations = 999;
  EXPECT_EQ(jump_times(ep, cfg), (std::vector<double>{2.5}));
}

TEST(JumpTimes, NoChangeIsEmpty) {
  Episode ep;
  for (int k = 0; k < 30; ++k) ep.events.push_back(event(k, {1.0}));
  ep.censor_time = 30.0;
  EXPECT_TRUE(jump_times(ep, {}).empty());
}

TEST(JumpTimes, FinalJumpLocated) {
  const auto p = one_transient_model();
  int hits = 0, runs = 0;
  for (std::uint64_t r = 0; r < 100; ++r) {
    SampleConfig sc;
    sc.seed = derive_seed(31, {r});
    const auto d = sample_episode(p, sc);
    const double jump = d.path.jump_times.back();
    int truth = 0;
    for (const auto& e : d.episode.events) truth += e.t < jump;
    ++runs;
    ChangePointConfig cfg;
    cfg.seed = r;
    const auto taus = jump_times(d.episode, cfg);
    if (taus.empty()) continue;
    int found = 0;
    for (const auto& e : d.episode.events) found += e.t < taus.back();
    hits += std::abs(found - truth) <= 2;
  }
  EXPECT_GE(hits, 90 * runs / 100);
}
