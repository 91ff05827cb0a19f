#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ssda {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, tag, index...). Used wherever a component
// needs its own reproducible randomness (per image, per worker, per epoch).
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  std::uint64_t state = splitmix64(seed);
  for (auto s : stream) state = splitmix64(state ^ splitmix64(s + 0x632be59bd9b4e019ULL));
  return Rng(state);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace ssda
