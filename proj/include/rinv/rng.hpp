// Seed splitting and portable draws. The standard distributions are
// implementation-defined, so data synthesis and subsampling use these instead.
#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace rinv {

/// Consumers of the root seed; each receives an independent stream.
enum class SeedStream : std::uint64_t { data = 1, init, dropout, augmentation, shuffle, selection, subset };

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t split_seed(std::uint64_t root, std::uint64_t stream) {
  return splitmix64(splitmix64(root) ^ splitmix64(stream * 0xd1b54a32d192ed03ULL));
}

inline std::uint64_t split_seed(std::uint64_t root, SeedStream stream) {
  return split_seed(root, static_cast<std::uint64_t>(stream));
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Unbiased integer in [0, n).
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return r % n;
}

template <typename V>
void shuffle(std::vector<V>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace rinv
