#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace smmh {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Hash a seed together with a path of stream keys into a new seed. Streams
// derived from distinct key paths are statistically independent, so work can
// be split per episode / per segment without depending on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed ^ 0x5851f42d4c957f2dULL);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

// Seedable, splittable generator. One instance owns exactly one stream.
class Rng {
 public:
  using Engine = std::mt19937_64;

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  [[nodiscard]] Rng split(std::uint64_t key) const { return Rng(derive_seed(seed_, {key})); }
  [[nodiscard]] Rng split(std::uint64_t a, std::uint64_t b) const { return Rng(derive_seed(seed_, {a, b})); }

  // Uniform on the open interval (0, 1); never returns 0 so -log(u) is finite.
  double uniform() {
    double u;
    do {
      u = std::generate_canonical<double, 64>(engine_);
    } while (u <= 0.0);
    return u;
  }

  double exponential(double rate) {
    return -std::log(uniform()) / rate;
  }

  double normal() { return normal_(engine_); }

  double gamma(double shape, double scale) {
    std::gamma_distribution<double> dist(shape, scale);
    return dist(engine_);
  }

  // Index drawn from an unnormalized discrete distribution.
  template <class Weights>
  int categorical(const Weights& w) {
    double total = 0.0;
    for (auto x : w) total += x;
    double r = uniform() * total;
    int last_positive = -1;
    int i = 0;
    for (auto x : w) {
      if (x > 0.0) {
        last_positive = i;
        if (r < x) return i;
        r -= x;
      }
      ++i;
    }
    return last_positive;
  }

  Engine& engine() { return engine_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  Engine engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace smmh
