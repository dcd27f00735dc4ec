#pragma once

#include <cstddef>
#include <cstdint>

namespace probdrop {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Counter-based generator for one (seed, batch, channel, trial) substream.
/// Draw k depends only on the key and k, so slices can be sampled in any
/// order or on any thread with identical results.
class SliceRng {
 public:
  explicit SliceRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// True with probability p (p <= 0 never, p >= 1 always). Always consumes one draw.
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t draws() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Root of a deterministic family of substreams.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t trial = 0;

  SliceRng substream(std::size_t batch, std::size_t channel) const {
    std::uint64_t k = mix64(seed);
    k = mix64(k ^ 0xB0u ^ (static_cast<std::uint64_t>(batch) << 8));
    k = mix64(k ^ 0xC1u ^ (static_cast<std::uint64_t>(channel) << 8));
    k = mix64(k ^ 0xD2u ^ (trial << 8));
    return SliceRng(k);
  }
};

}  // namespace probdrop
