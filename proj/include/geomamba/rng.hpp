#pragma once

#include <cstdint>
#include <random>

namespace geomamba {

using Rng = std::mt19937_64;

/// splitmix64 finaliser.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent generator for (seed, stream) so that per-sample draws do not
/// depend on the order in which samples are processed.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  return Rng(mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL)));
}

// Stream tags for the run-level generators.
enum class StreamTag : std::uint64_t {
  kInit = 1,
  kSampler = 2,
  kAugment = 3,
  kGfiPairing = 4,
  kSynth = 5,
};

inline Rng make_stream(std::uint64_t seed, StreamTag tag) { return make_stream(seed, static_cast<std::uint64_t>(tag) << 48); }

}  // namespace geomamba
