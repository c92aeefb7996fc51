#pragma once

#include <cstdint>
#include <random>

namespace calseg {

using Rng = std::mt19937_64;

/// splitmix64 finalizer: full 64-bit avalanche.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Child seed for stream `index` of `seed`. Independent of evaluation order,
/// so parallel consumers may derive seeds in any order.
constexpr std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed + 0x9e3779b97f4a7c15ULL * (index + 1));
}

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

}  // namespace calseg
