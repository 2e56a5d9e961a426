#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace digitsum {

using rng_type = std::mt19937_64;

// splitmix64 finalizer; used to derive independent sub-stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline rng_type make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return rng_type(mix_seed(seed ^ mix_seed(stream)));
}

// Uniform double in [0, 1) from the top 53 bits; identical across standard libraries.
inline double uniform01(rng_type& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, n) by rejection.
inline std::uint64_t uniform_index(rng_type& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

// Fisher-Yates with uniform_index so the permutation is portable.
template <typename Range>
void shuffle(Range& r, rng_type& rng) {
  using std::swap;
  const auto n = static_cast<std::uint64_t>(std::size(r));
  for (std::uint64_t i = n; i > 1; --i) {
    swap(r[i - 1], r[uniform_index(rng, i)]);
  }
}

// Standard normal by Box-Muller.
inline double normal01(rng_type& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace digitsum
