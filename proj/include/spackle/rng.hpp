#pragma once

#include <cstdint>
#include <initializer_list>

namespace spackle {

// SplitMix64 (Steele, Lea, Flood 2014). Used everywhere instead of the
// <random> engines so that every stream is a pure, platform-independent
// function of its seed.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  bool bernoulli(double p) { return uniform01() < p; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free would bias for huge n; n here is always << 2^32.
    return next() % n;
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Deterministic seed derivation: fold each component into the state with
// the SplitMix64 finalizer. Documented in the README so runs replicate
// across machines; do not reorder components.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0xA0761D6478BD642FULL;
  for (std::uint64_t p : parts) h = mix64(h ^ p);
  return h;
}

// Stream tags for derive_seed. Keeping them in one place avoids collisions.
namespace seed_tag {
inline constexpr std::uint64_t field = 1;       // synthetic expression fields
inline constexpr std::uint64_t dropout = 2;     // synthetic dropout mask
inline constexpr std::uint64_t init = 3;        // parameter initialization
inline constexpr std::uint64_t train_mask = 4;  // per-iteration training masks
inline constexpr std::uint64_t val_mask = 5;    // fixed validation masks
inline constexpr std::uint64_t shuffle = 6;     // epoch shuffling
inline constexpr std::uint64_t corrupt = 7;     // evaluation corruption masks
}  // namespace seed_tag

}  // namespace spackle
