#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "oeseg/error.hpp"

namespace oeseg {

// SplitMix64 generator. Self-contained so that every seeded result is
// identical across platforms and standard-library versions (std
// distributions are not bit-pinned by the standard).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::next_below: n must be positive");
    std::uint64_t threshold = (0ULL - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller (cosine branch only, no cached state).
  double next_normal() {
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Normal(0, std) truncated to [-2*std, 2*std] by rejection.
  double next_trunc_normal(double stddev) {
    for (;;) {
      double z = next_normal();
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // First k entries of a Fisher-Yates pass over 0..n-1: a uniform sample
  // without replacement, in draw order.
  std::vector<std::uint32_t> sample_without_replacement(std::uint32_t n, std::uint32_t k) {
    if (k > n) throw ContractError("sample_without_replacement: k exceeds n");
    std::vector<std::uint32_t> arr(n);
    for (std::uint32_t i = 0; i < n; ++i) arr[i] = i;
    for (std::uint32_t i = 0; i < k; ++i) {
      std::uint32_t j = i + static_cast<std::uint32_t>(next_below(n - i));
      std::swap(arr[i], arr[j]);
    }
    arr.resize(k);
    return arr;
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream from (seed, salt...) tuples, e.g. per
// (seed, epoch, sample) so augmentation draws are replayable.
inline std::uint64_t mix_seed(std::uint64_t a) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename... Rest>
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a) ^ (b + 0x9e3779b97f4a7c15ULL), rest...);
}

}  // namespace oeseg
