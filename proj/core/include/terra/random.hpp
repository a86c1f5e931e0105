#pragma once

#include <cstdint>

namespace terra {

// SplitMix64 (Steele, Lea, Flood 2014). Chosen as the project-wide PRNG
// because the update is pure 64-bit integer arithmetic: streams are
// bit-identical on every platform, which the synthetic data generator
// relies on. Child streams are derived by hashing (state, tag) so a
// generator can be split without consuming draws from the parent.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1) from the top 53 bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n), n > 0. Lemire multiply-shift; no modulo bias
  // worth caring about at 64-bit width.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  int next_int(int n) { return static_cast<int>(next_below(static_cast<std::uint64_t>(n))); }

  // Independent child stream identified by an integer tag.
  SplitMix64 split(std::uint64_t tag) const { return SplitMix64(mix(state_, tag)); }

  // Stateless mixing of two words; used to key streams by (seed, index, tag).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// FNV-1a, used for config/spec hashes recorded in checkpoints and manifests.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n,
                           std::uint64_t h = 0xCBF29CE484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace terra
