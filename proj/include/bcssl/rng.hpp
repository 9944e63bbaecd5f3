// Copyright (c) 2026 the bcssl authors. All rights reserved.
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

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>
#include <vector>

namespace bcssl {

// Counter-based deterministic RNG. Every consumer derives its own stream from
// an explicit key (seed + purpose tags), so draw order never depends on
// scheduling, thread count, or evaluation order of unrelated code. The
// generator is the splitmix64 finalizer over key + counter; distribution
// transforms are written out explicitly (std::* distributions are
// implementation-defined and would break cross-build determinism).
class Rng {
 public:
  explicit Rng(uint64_t key) : key_(key) {}

  static constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  static uint64_t hash_combine(uint64_t h, uint64_t v) { return mix64(h ^ (v + kGolden + (h << 6) + (h >> 2))); }

  static uint64_t key_of(std::initializer_list<uint64_t> parts) {
    uint64_t h = 0x243f6a8885a308d3ULL;  // arbitrary non-zero start
    for (uint64_t p : parts) h = hash_combine(h, p);
    return h;
  }

  static uint64_t key_of(uint64_t seed, std::string_view tag) {
    uint64_t h = key_of({seed});
    for (char c : tag) h = hash_combine(h, (uint64_t)(unsigned char)c);
    return h;
  }

  uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

  // Uniform double in [0, 1) with 53 random bits.
  double next_double() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n). Rejection-free modulo is fine here: n is always
  // tiny relative to 2^64 so the bias is far below anything observable.
  int uniform_int(int n) { return (int)(next_u64() % (uint64_t)n); }

  bool bernoulli(double p) { return next_double() < p; }

  // Standard normal via Box-Muller. One draw per call; the sine partner is
  // discarded to keep the stream layout simple.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    // Guard against log(0).
    if (u1 <= 0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, stddev) truncated to [lo, hi] by rejection.
  double trunc_normal(double stddev, double lo, double hi) {
    for (;;) {
      double v = normal() * stddev;
      if (v >= lo && v <= hi) return v;
    }
  }

  // Fisher-Yates shuffle of indices [0, n); deterministic for a given key.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = (size_t)(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace bcssl
