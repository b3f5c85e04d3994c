#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace funnel {

/// xoshiro256** (Blackman & Vigna), state seeded by four splitmix64 draws
/// from the 64-bit seed. The integer stream is identical on every platform;
/// uniform() uses the top 53 bits, so it is portable as well. normal() goes
/// through libm (log, cos) and is portable only up to libm rounding.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform double in [0, 1).
  double uniform();
  /// Uniform integer in [0, n). n must be > 0. Unbiased (rejection).
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();
  /// Normal(0, stddev) resampled until |z| <= 2 stddev.
  double truncated_normal(double stddev);

  /// Independent child stream; deterministic in (this state, stream id).
  Rng fork(std::uint64_t stream_id);

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace funnel
