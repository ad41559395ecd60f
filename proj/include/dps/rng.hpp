#pragma once

#include <cmath>
#include <cstdint>

namespace dps {

/// Counter-based 64-bit generator (SplitMix64 finalizer over seed + i*gamma).
///
/// The i-th draw depends only on (seed, i), so streams are reproducible
/// bit-exactly across platforms and can be forked without sharing state.
struct CounterRng {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  explicit CounterRng(std::uint64_t s = 0) : seed(s) {}

  std::uint64_t next_u64() { return mix(seed + (++counter) * kGamma); }

  /// Uniform double in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n). Modulo bias is irrelevant here (n << 2^64).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  /// Independent stream derived from this seed and a stream tag.
  CounterRng fork(std::uint64_t stream) const { return CounterRng(mix(seed ^ mix(stream + 1))); }
};

/// sin(x) evaluated with IEEE +,*,/ only (range fold + Taylor polynomial),
/// giving bit-identical results on every IEEE-754 platform. Absolute error
/// below 1e-9 on the fold interval, which is plenty for procedural textures.
inline double portable_sin(double x) {
  constexpr double kPi = 3.14159265358979323846;
  constexpr double kTwoPi = 6.28318530717958647693;
  double t = x - std::floor(x / kTwoPi) * kTwoPi;  // [0, 2pi)
  double sign = 1.0;
  if (t >= kPi) {
    t -= kPi;
    sign = -1.0;
  }
  if (t > kPi * 0.5) t = kPi - t;  // [0, pi/2]
  const double t2 = t * t;
  const double p = 1.0 +
                   t2 * (-1.0 / 6.0 +
                         t2 * (1.0 / 120.0 +
                               t2 * (-1.0 / 5040.0 +
                                     t2 * (1.0 / 362880.0 +
                                           t2 * (-1.0 / 39916800.0 + t2 * (1.0 / 6227020800.0))))));
  return sign * t * p;
}

inline double portable_cos(double x) { return portable_sin(x + 1.57079632679489661923); }

}  // namespace dps
