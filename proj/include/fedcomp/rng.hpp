#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedcomp {

using Engine = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
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

}  // namespace detail

// Stream splitting rule: every random draw in the project comes from an
// engine seeded with derive_seed(top_seed, role, i, j). Roles are short
// fixed strings ("init", "local", "aux", ...); i and j are role specific
// indices (user, round, trial). Changing one role's indices never perturbs
// another role's stream.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view role,
                                    std::uint64_t i = 0, std::uint64_t j = 0) {
  std::uint64_t h = detail::splitmix64(seed);
  h = detail::splitmix64(h ^ detail::fnv1a(role));
  h = detail::splitmix64(h ^ i);
  h = detail::splitmix64(h ^ (j * 0xd6e8feb86659fd93ULL));
  return h;
}

inline Engine make_engine(std::uint64_t seed, std::string_view role,
                          std::uint64_t i = 0, std::uint64_t j = 0) {
  return Engine{derive_seed(seed, role, i, j)};
}

// 64-bit FNV-1a over bytes; used for config hashes and result digests.
inline std::uint64_t digest(std::string_view bytes) { return detail::fnv1a(bytes); }

}  // namespace fedcomp
