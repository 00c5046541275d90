// Copyright 2026 The gsn Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace gsn {

/// Philox4x32-10 (Salmon et al., SC'11).
///
/// Counter-based: the output is a pure function of (counter, key), so any
/// (index, path, step) sample can be drawn independently of scheduling.
struct Philox4x32 {
  using ctr_type = std::array<std::uint32_t, 4>;
  using key_type = std::array<std::uint32_t, 2>;

  static ctr_type apply(ctr_type c, key_type k) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int r = 0; r < 10; ++r) {
      if (r > 0) {
        k[0] += W0;
        k[1] += W1;
      }
      const std::uint64_t p0 = static_cast<std::uint64_t>(M0) * c[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(M1) * c[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
      c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
    return c;
  }
};

/// Independent N(0,1) draws addressed by (domain, u, p, k, j).
///
/// domain separates unrelated uses of one seed (initial states, follower
/// increments, leader increments, random test data).
class NormalStream {
 public:
  enum Domain : std::uint32_t { kInitial = 1, kFollower = 2, kLeader = 3, kAux = 4 };

  explicit NormalStream(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  double operator()(std::uint32_t domain, std::uint32_t u, std::uint32_t p, std::uint32_t k,
                    std::uint32_t j) const {
    const Philox4x32::ctr_type c{k, (domain << 24) | (j >> 1), p, u};
    const auto r = Philox4x32::apply(c, key_);
    const std::uint64_t a = (static_cast<std::uint64_t>(r[0]) << 21) ^ (r[1] >> 11);
    const std::uint64_t b = (static_cast<std::uint64_t>(r[2]) << 21) ^ (r[3] >> 11);
    constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
    const double u1 = (static_cast<double>(a & ((1ULL << 53) - 1)) + 0.5) * kScale;
    const double u2 = static_cast<double>(b & ((1ULL << 53) - 1)) * kScale;
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double th = 6.283185307179586476925 * u2;
    return (j & 1u) ? rad * std::sin(th) : rad * std::cos(th);
  }

  /// Uniform on [0,1) from the same counter space.
  double uniform(std::uint32_t domain, std::uint32_t u, std::uint32_t p, std::uint32_t k) const {
    const Philox4x32::ctr_type c{k, (domain << 24) | 0x800000u, p, u};
    const auto r = Philox4x32::apply(c, key_);
    const std::uint64_t a = (static_cast<std::uint64_t>(r[0]) << 21) ^ (r[1] >> 11);
    return static_cast<double>(a & ((1ULL << 53) - 1)) / 9007199254740992.0;
  }

 private:
  Philox4x32::key_type key_;
};

}  // namespace gsn
