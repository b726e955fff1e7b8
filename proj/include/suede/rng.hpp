#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace suede {

// Splitmix-style 64-bit PRNG. Deterministic, trivially seedable, and good
// enough for parameter init and data generation. All randomness in the
// project flows through this so that runs are reproducible from one seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  double normal() {
    // Box-Muller; one value per call keeps state consumption predictable.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Normal with rejection outside +-2 sigma.
  double truncated_normal(double stddev) {
    for (;;) {
      double v = normal();
      if (v >= -2.0 && v <= 2.0) return v * stddev;
    }
  }

  // Derive an independent stream, e.g. named sub-streams of a master seed.
  Rng split(std::string_view label) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : label) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ULL;
    }
    Rng child(state_ ^ h);
    child.next_u64();  // decorrelate from the raw seed
    return child;
  }

  Rng split(std::uint64_t label) const {
    Rng child(state_ ^ (label * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
    child.next_u64();
    return child;
  }

 private:
  std::uint64_t state_;
};

}  // namespace suede
