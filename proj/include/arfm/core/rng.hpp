#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "arfm/core/tensor.hpp"

namespace arfm {

/// Philox4x32-10 block function. Pure function of
/// (counter, key), which makes every draw addressable and platform independent.
inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    const std::uint64_t p0 = std::uint64_t(kM0) * ctr[0];
    const std::uint64_t p1 = std::uint64_t(kM1) * ctr[2];
    const auto hi0 = std::uint32_t(p0 >> 32), lo0 = std::uint32_t(p0);
    const auto hi1 = std::uint32_t(p1 >> 32), lo1 = std::uint32_t(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Counter-based generator. The key is the seed; the high counter words hold a
/// stream id, the low words a block index. split(i) derives an independent
/// substream, so batch element i can own split(i) regardless of scheduling.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  SeededRng split(std::uint64_t i) const {
    return SeededRng(seed_, splitmix64(stream_ ^ splitmix64(i + 0x5851F42D4C957F2Dull)));
  }

  std::uint32_t next_u32() {
    if (lane_ == 4) refill();
    return buf_[lane_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform float in [0, 1) with 24 bits of resolution.
  float uniform() { return float(next_u32() >> 8) * 0x1.0p-24f; }

  /// Uniform double in [0, 1) with 53 bits of resolution.
  double uniform_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint32_t below(std::uint32_t n) {
    const std::uint32_t limit = std::uint32_t(-n) % n;  // 2^32 mod n
    for (;;) {
      const std::uint32_t r = next_u32();
      const std::uint64_t m = std::uint64_t(r) * n;
      if (std::uint32_t(m) >= limit) return std::uint32_t(m >> 32);
    }
  }

  bool bernoulli(double p) { return uniform_double() < p; }

  /// Standard normal via Box-Muller on (0,1] x [0,1); pairs are cached.
  float normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = (double(next_u32()) + 1.0) * 0x1.0p-32;
    const double u2 = double(next_u32()) * 0x1.0p-32;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = float(r * std::sin(th));
    has_spare_ = true;
    return float(r * std::cos(th));
  }

 private:
  void refill() {
    const std::array<std::uint32_t, 4> ctr = {
        std::uint32_t(block_), std::uint32_t(block_ >> 32), std::uint32_t(stream_),
        std::uint32_t(stream_ >> 32)};
    buf_ = philox4x32_10(ctr, {std::uint32_t(seed_), std::uint32_t(seed_ >> 32)});
    ++block_;
    lane_ = 0;
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int lane_ = 4;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

/// I.i.d. standard normal tensor.
inline Tensor gauss_sample(SeededRng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace arfm
