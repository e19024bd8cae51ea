#ifndef PREVCURVE_RANDOM_HPP
#define PREVCURVE_RANDOM_HPP

#include <cstdint>
#include <random>

namespace prevcurve {

// Stream tags keep the generators of different pipeline stages disjoint.
enum class Stream : std::uint64_t {
  TruthCoefficients = 1,
  TruthWeights = 2,
  Ensemble = 3,
  Margins = 4,
  Survey = 5,
  WeightPosterior = 6,
  Particles = 7,
  Validation = 8,
  Kernel = 9,
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Counter-based substream derivation: the generator for (seed, stream, index)
/// depends only on those three values, so work can be split across threads
/// without changing the output.
inline std::mt19937_64 substream(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::uint64_t key = splitmix64(seed);
  key = splitmix64(key ^ static_cast<std::uint64_t>(stream));
  key = splitmix64(key ^ index);
  return std::mt19937_64(key);
}

}  // namespace prevcurve

#endif  // PREVCURVE_RANDOM_HPP
