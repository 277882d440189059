#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace rrs {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives a named sub-seed, e.g. derive_seed(global, "finetune/rrs").
/// Every random stream in the pipeline comes from one global seed this way.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return mix64(seed ^ mix64(fnv1a(purpose)));
}

/// Hash of a sequence of integer keys, used for keyed pseudo-random values.
constexpr std::uint64_t keyed_hash(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x51ed270b27c4f0a3ULL;
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return h;
}

/// Maps a 64-bit hash to [-1, 1).
constexpr double hash_to_signed_unit(std::uint64_t h) {
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0) * 2.0 - 1.0;
}

inline Rng make_rng(std::uint64_t seed, std::string_view purpose) {
  return Rng(derive_seed(seed, purpose));
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace rrs
