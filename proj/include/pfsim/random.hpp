#pragma once

// Random streams and seed derivation.
//
// Every stochastic routine takes its generator explicitly. Independent
// streams (per stage, per CV candidate and fold, per outer P_f iteration)
// come from derive_seed(), which hashes a label and a list of indices into
// the master seed:
//
//   h = fnv1a64(label)
//   s = splitmix64(master ^ h)
//   for each index i:  s = splitmix64(s ^ splitmix64(i + 0x9e37...))
//
// The derivation is stable across platforms and thread counts.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace pfsim {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
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

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                 std::initializer_list<std::uint64_t> indices = {}) noexcept {
  std::uint64_t s = splitmix64(master ^ fnv1a64(label));
  for (std::uint64_t i : indices) s = splitmix64(s ^ splitmix64(i + 0x9e3779b97f4a7c15ULL));
  return s;
}

inline Rng make_rng(std::uint64_t master, std::string_view label,
                    std::initializer_list<std::uint64_t> indices = {}) {
  return Rng(derive_seed(master, label, indices));
}

// Uniform on the open interval (0, 1); 53 random bits, never 0 or 1.
inline double uniform_open(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

// Uniform index in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace pfsim
