#pragma once

#include <cmath>
#include <cstdint>

namespace rstn {

// Counter-based pseudo-random source: SplitMix64 evaluated at counter
// offsets, out(i) = mix64(seed + (i+1) * 0x9E3779B97F4A7C15). The whole
// artifact draws randomness through this one generator so corpora, fold
// splits and weight initializations are reproducible from a 64-bit seed.
inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t at(std::uint64_t i) const {
    return mix64(seed_ + (i + 1) * 0x9E3779B97F4A7C15ull);
  }

  std::uint64_t next_u64() { return at(counter_++); }

  // Uniform in [0,1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_in(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Modulo draw; bias is negligible for the small ranges used here.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  int next_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Box-Muller; consumes two uniforms per pair, caches the second value.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Independent substream key: derive(seed, tag) feeds a fresh CounterRng.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(mix64(seed) ^ mix64(tag ^ 0xA5A5A5A55A5A5A5Aull));
}

}  // namespace rstn
