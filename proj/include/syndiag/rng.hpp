#pragma once

#include <cmath>
#include <cstdint>

namespace syndiag {

// Counter-based deterministic RNG. Every draw is a pure function of
// (seed, counter), so streams can be split and replayed exactly on any
// platform. Mixing function is splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), counter_(0) {}

  Rng(uint64_t seed, uint64_t stream) : seed_(mix(seed ^ 0x9e3779b97f4a7c15ULL) + stream), counter_(0) {}

  uint64_t next_u64() { return mix(seed_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  // Uniform in [0, 1).
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller.
  double gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  // Independent child stream, reproducible per tag.
  Rng split(uint64_t tag) const { return Rng(mix(seed_ ^ mix(tag)), 0x6a09e667f3bcc908ULL); }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t counter_;
};

}  // namespace syndiag
