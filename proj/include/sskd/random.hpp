#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sskd {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a, stable across platforms (std::hash is not).
constexpr std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return mix64(seed ^ mix64(hash_tag(tag)));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// Independent stream per (seed, tag); all randomness in the library goes
// through here so there is no hidden global entropy.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view tag) {
  return std::mt19937_64(derive_seed(seed, tag));
}

}  // namespace sskd
