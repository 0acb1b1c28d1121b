#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace schedlab {

/// splitmix64 finalizer folded over the inputs; used to derive independent
/// stream seeds from (seed, epoch, step, ...) tuples.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

/// Seeded pseudo-random source. Sequences are reproducible within a build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform in the open interval (0, 1).
  double uniform_open() {
    double u;
    do u = uniform(); while (u == 0.0);
    return u;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_(engine_); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

}  // namespace schedlab
