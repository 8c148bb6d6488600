#pragma once

#include <cstdint>
#include <random>

namespace dirac {

/// The project-wide generator: 64-bit Mersenne Twister (MT19937-64). Its
/// output sequence is fixed by the C++ standard, so equal seeds give equal
/// streams on every platform. Distributions are derived by hand below because
/// the standard library distributions are implementation-defined.
using Rng = std::mt19937_64;

inline Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

/// Uniform on [0, 1) with 53 bits of resolution.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n) by rejection, so the result is unbiased.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

/// SplitMix64 output function for state x (Vigna). Used for counter-based
/// draws where the value must depend only on its coordinates.
inline std::uint64_t splitmix64(std::uint64_t x) {
  std::uint64_t z = x + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic uniform in [0, 1) keyed by (seed, a, b).
inline double hashed_uniform01(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Fisher-Yates shuffle driven by uniform_index.
template <typename Container>
void shuffle(Container& c, Rng& rng) {
  for (std::size_t i = c.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(c[i - 1], c[j]);
  }
}

}  // namespace dirac
