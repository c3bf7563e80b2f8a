#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace heparl {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named sub-stream of the run seed ("etl", "init", "sampling", "eval", "embed", ...).
inline Rng make_stream(std::uint64_t seed, std::string_view name) {
  return Rng(mix64(seed ^ fnv1a64(name)));
}

// Per-item stream: seed + index through the 64-bit mix. Used for patients and
// rollouts so that batched and serial generation agree.
inline Rng make_indexed_stream(std::uint64_t seed, std::uint64_t index) {
  return Rng(mix64(seed + index));
}

}  // namespace heparl
