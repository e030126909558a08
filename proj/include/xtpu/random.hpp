#pragma once

#include <cstdint>
#include <random>

namespace xtpu {

/// Generator used everywhere a caller-owned random stream is required.
using Rng = std::mt19937_64;

/// SplitMix64 finalizer; decorrelates (seed, stream) pairs before seeding an Rng.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Deterministic child stream `stream` of a master seed.
inline Rng child_rng(std::uint64_t master_seed, std::uint64_t stream) {
  return Rng(splitmix64(master_seed ^ splitmix64(stream + 1)));
}

}  // namespace xtpu
