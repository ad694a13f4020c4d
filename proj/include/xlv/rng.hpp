#pragma once

#include <cstdint>
#include <random>

namespace xlv {

/// Seeded random source used for parameter init and synthetic data.
/// All randomness in the project flows through an explicitly seeded Rng;
/// there is no global engine.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  /// Normal(0, stddev) resampled until within +/- 2 stddev.
  double trunc_normal(double stddev) {
    if (stddev == 0.0) return 0.0;
    for (;;) {
      double x = normal(0.0, stddev);
      if (x >= -2.0 * stddev && x <= 2.0 * stddev) return x;
    }
  }

  /// Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(gen_);
  }

  std::uint64_t raw() { return gen_(); }

  /// Independent substream derived from this seed and a stream id.
  Rng fork(std::uint64_t stream) {
    std::uint64_t base = gen_();
    return Rng(base ^ (stream * 0x9e3779b97f4a7c15ull));
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace xlv
