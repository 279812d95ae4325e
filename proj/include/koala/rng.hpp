#ifndef KOALA_RNG_HPP
#define KOALA_RNG_HPP

#include <array>
#include <cmath>
#include <cstdint>

namespace koala {

// Counter-based generator (splitmix64 over seed ^ golden-ratio counter walk).
// Chosen over std::mt19937 + std::*_distribution because the standard
// distributions are implementation-defined; this one produces identical
// streams on every platform and serializes as two 64-bit words, which makes
// checkpoint resume and cross-run reproducibility exact.
class Rng {
 public:
  Rng() : seed_(0), counter_(0) {}
  explicit Rng(uint64_t seed) : seed_(seed), counter_(0) {}

  uint64_t next_u64() {
    uint64_t z = seed_ + (counter_++ + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  // Standard normal via Box-Muller. Always consumes exactly two draws and
  // returns one value, so the state stays a pure function of the counter.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }
  void set_state(uint64_t seed, uint64_t counter) {
    seed_ = seed;
    counter_ = counter;
  }

  // Derives an independent stream; used for per-image / per-purpose seeds.
  static uint64_t derive(uint64_t seed, uint64_t salt) {
    Rng r(seed ^ (salt * 0xD1B54A32D192ED03ULL + 0x9E6D62D06F6FE93ULL));
    return r.next_u64();
  }

 private:
  uint64_t seed_;
  uint64_t counter_;
};

}  // namespace koala

#endif  // KOALA_RNG_HPP
