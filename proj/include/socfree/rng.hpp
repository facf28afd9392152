// SPDX-License-Identifier: Apache-2.0
//
// Counter-based RNG (Philox4x32-10) with named, independent streams.
//
// Every random draw in the library is addressed by
//   (seed, purpose, epoch, walker, draw index)
// so results are reproducible regardless of thread scheduling and walkers
// can be generated in any order.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace socfree {

// Purpose tags keep logically distinct streams (time grids, Wiener noise,
// parameter init, ...) independent even for equal (seed, epoch, walker).
enum class StreamPurpose : std::uint32_t {
  time_grid = 0x9e3701,
  init_state = 0x9e3702,
  wiener = 0x9e3703,
  policy_init = 0x9e3704,
  evaluation = 0x9e3705,
  generic = 0x9e3706,
};

class PhiloxRng {
 public:
  // Counter layout: words 0-1 hold the running block index, words 2-3 the
  // (walker, epoch) lanes, so distinct walkers/epochs can never collide.
  // The high halves of walker/epoch fold into the key.
  PhiloxRng(std::uint64_t seed, std::uint32_t purpose, std::uint64_t epoch,
            std::uint64_t walker)
      : key_{static_cast<std::uint32_t>(seed) ^
                 static_cast<std::uint32_t>(walker >> 32),
             static_cast<std::uint32_t>(seed >> 32) ^ purpose ^
                 static_cast<std::uint32_t>(epoch >> 32)},
        lane_{static_cast<std::uint32_t>(walker),
              static_cast<std::uint32_t>(epoch)},
        block_(0),
        idx_(4),
        has_cached_(false),
        cached_(0.0) {}

  std::uint32_t next_u32() {
    if (idx_ >= 4) refill();
    return out_[idx_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return lo | (hi << 32);
  }

  // Uniform on (0, 1]; never returns 0, so log(uniform()) is always finite.
  double uniform() {
    return (static_cast<double>(next_u32()) + 1.0) * 0x1p-32;
  }

  // Uniform on (0, 1): both endpoints excluded.
  double uniform_open() {
    return (static_cast<double>(next_u32()) + 0.5) * 0x1p-32;
  }

  // Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint32_t mul_hi(std::uint32_t a, std::uint32_t b) {
    return static_cast<std::uint32_t>(
        (static_cast<std::uint64_t>(a) * b) >> 32);
  }

  void refill() {
    std::array<std::uint32_t, 4> ctr = {static_cast<std::uint32_t>(block_),
                                        static_cast<std::uint32_t>(block_ >> 32),
                                        lane_[0], lane_[1]};
    std::uint32_t k0 = key_[0], k1 = key_[1];
    for (int round = 0; round < 10; ++round) {
      const std::uint32_t hi0 = mul_hi(0xD2511F53u, ctr[0]);
      const std::uint32_t lo0 = 0xD2511F53u * ctr[0];
      const std::uint32_t hi1 = mul_hi(0xCD9E8D57u, ctr[2]);
      const std::uint32_t lo1 = 0xCD9E8D57u * ctr[2];
      ctr = {hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0};
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    out_ = ctr;
    ++block_;
    idx_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 2> lane_;
  std::uint64_t block_;
  std::array<std::uint32_t, 4> out_;
  int idx_;
  bool has_cached_;
  double cached_;
};

// Factory bundling (seed, epoch).  Estimators draw one stream per purpose
// and walker; training advances `epoch` once per iteration so fresh noise is
// used without any state threading between iterations.
struct RngSeq {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;

  PhiloxRng stream(StreamPurpose purpose, std::uint64_t walker = 0) const {
    return PhiloxRng(seed, static_cast<std::uint32_t>(purpose), epoch, walker);
  }

  RngSeq at_epoch(std::uint64_t e) const { return RngSeq{seed, e}; }
};

}  // namespace socfree
