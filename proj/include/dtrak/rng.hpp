#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <optional>
#include <vector>

namespace dtrak {

/// Purpose tags keep independent consumers of one seed from sharing draws.
enum class Purpose : std::uint64_t {
  kInit = 1,
  kTrainNoise = 2,
  kPermutation = 3,
  kLossNoise = 4,
  kProjection = 5,
  kSubset = 6,
  kSampling = 7,
  kBootstrap = 8,
  kRemoval = 9,
  kEmbedder = 10,
  kData = 11,
  kModelSeed = 12,
  kJourneyNoise = 13,
  kTest = 99,
};

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Folds a key tuple into a single 64-bit state. Order matters.
constexpr std::uint64_t derive_key(std::uint64_t seed, Purpose purpose,
                                   std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed + kGolden);
  h = mix64(h ^ mix64(static_cast<std::uint64_t>(purpose) * kGolden + 1));
  std::uint64_t i = 2;
  for (std::uint64_t k : keys) {
    h = mix64(h ^ mix64(k + i * kGolden));
    ++i;
  }
  return h;
}

/// SplitMix64 stream. Gaussians come from Box-Muller on two consecutive
/// outputs; the sine half is cached and returned by the next call.
class SeededStream {
 public:
  explicit SeededStream(std::uint64_t state) : state_(state) {}

  static SeededStream keyed(std::uint64_t seed, Purpose purpose,
                            std::initializer_list<std::uint64_t> keys = {}) {
    return SeededStream(derive_key(seed, purpose, keys));
  }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix64(state_);
  }

  /// Uniform in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  double next_gaussian() {
    if (spare_) {
      double z = *spare_;
      spare_.reset();
      return z;
    }
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    return r * std::cos(angle);
  }

  /// Uniform integer in [0, n) by rejection, n > 0.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n + 1) % n;
    std::uint64_t x = next_u64();
    while (x > limit) x = next_u64();
    return x % n;
  }

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

/// Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, SeededStream& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

/// `count` distinct indices from [0, n), returned in ascending order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count,
                                                          SeededStream& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.next_below(n - i));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(count);
  std::sort(perm.begin(), perm.end());
  return perm;
}

}  // namespace dtrak
