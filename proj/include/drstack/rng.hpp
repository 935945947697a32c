#pragma once

#include <cstdint>

namespace drstack {

/// Deterministic 64-bit stream (splitmix64).  Used for scenario generation so
/// that a fixed seed reproduces byte-identical scenarios on every platform;
/// std::uniform_real_distribution is deliberately avoided because its output
/// is not pinned down by the standard.
///
/// Algorithm: state advances by the golden-gamma constant 0x9E3779B97F4A7C15;
/// the output is the finalizer
///   z  = state
///   z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
///   z ^= z >> 27;  z *= 0x94D049BB133111EB
///   z ^= z >> 31
/// Doubles in [lo, hi) are produced as lo + (z >> 11) * 2^-53 * (hi - lo).
struct SplitMix64 {
  std::uint64_t state = 0;

  explicit SplitMix64(std::uint64_t seed = 0) : state(seed) {}

  std::uint64_t next() {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + uniform01() * (hi - lo); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? next() % n : 0; }
};

}  // namespace drstack
