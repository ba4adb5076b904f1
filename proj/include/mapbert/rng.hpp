#pragma once

#include <cstdint>
#include <vector>

namespace mapbert {

/// Counter-based 64-bit generator.
///
/// The i-th output (i = 0, 1, ...) of a stream keyed by `seed` is
/// `mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`, where mix64 is the
/// SplitMix64 finalizer. Every derived quantity below is defined in terms of
/// that raw stream, so the sequence is reproducible in any language:
///   - uniform():      (u64 >> 11) * 2^-53, in [0, 1)
///   - below(n):       Lemire multiply-shift with rejection
///   - normal():       Box-Muller on (1 - uniform(), uniform()), cosine branch
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  static std::uint64_t mix64(std::uint64_t z);

  /// Seed of the `index`-th child stream of `seed` (the splittable counter).
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index);

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Uniform integer in [lo, hi] inclusive.
  int range(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  /// Standard normal resampled until |z| <= 2, scaled by `stddev`.
  double truncated_normal(double stddev);

  /// Fisher-Yates shuffle, drawing below(i + 1) for i = n-1 down to 1.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

/// FNV-1a 64-bit hash, used for config fingerprints.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace mapbert
