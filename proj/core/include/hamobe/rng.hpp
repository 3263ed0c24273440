#pragma once

#include <cstdint>
#include <random>

namespace hamobe {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a root seed and up to three keys.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ tag);
  h = splitmix64(h ^ a);
  return splitmix64(h ^ b);
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                                   std::uint64_t b = 0) {
  return std::mt19937_64(stream_seed(seed, tag, a, b));
}

// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace hamobe
