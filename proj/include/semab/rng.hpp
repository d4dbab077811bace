#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace semab {

/// Seedable random source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Distributions are implemented here rather than taken from
/// <random> because the standard leaves those implementation-defined:
///   - uniform(): top 53 bits of one draw scaled by 2^-53, in [0, 1)
///   - below(n): rejection sampling on the raw 64-bit draw
///   - normal(): Box-Muller using two uniform() draws, one value per call
///
/// Substreams are derived from the *seed* (not the current state) by mixing
/// the FNV-1a hash of a name and an optional index through SplitMix64, so
/// `Rng(s).substream("init")` is the same generator no matter how many
/// draws the parent has made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }

  Rng substream(std::string_view name, std::uint64_t index = 0) const;

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Standard normal truncated to [-2, 2] by rejection.
  double truncated_normal();
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view text);

}  // namespace semab
