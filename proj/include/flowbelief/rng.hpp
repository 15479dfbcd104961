#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace flowbelief {

// Deterministic splitmix64 generator.  All stochastic behaviour in the
// library flows through explicitly threaded Rng values, so a (config, seed)
// pair fixes every sample that training draws.  split() derives an
// independent stream for a subcomponent without perturbing the parent
// sequence, which keeps sampling order stable when components are added.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.  No caching of the second value: each
  // call consumes exactly two uniforms, so draw counts are easy to reason
  // about when replaying a stream.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  void fill_normal(std::vector<double>& out) {
    for (double& x : out) x = normal();
  }

  // Child generator for an independent stream.  Mixing the tag through one
  // u64() step decorrelates children with nearby tags.
  Rng split(std::uint64_t tag) {
    Rng child(u64() ^ (tag * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
    return child;
  }

 private:
  std::uint64_t state_;
};

}  // namespace flowbelief
