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
#include <numbers>
#include <string>

#include "bcssl/common.hpp"

namespace bcssl {

// Scalar schedule over a step counter t in [0, total_steps].
//
//   cosine:            linear warmup 0 -> base over warmup_steps, then
//                      final + 0.5*(base-final)*(1+cos(pi*t'/T')) on the rest.
//   linear_then_const: linear base -> final over warmup_steps, then final.
struct Schedule {
  enum class Kind { cosine, linear_then_const };

  Kind kind = Kind::cosine;
  double base = 0;
  double final = 0;
  int64_t total_steps = 0;
  int64_t warmup_steps = 0;

  static Schedule cosine(double base, double final, int64_t total, int64_t warmup = 0) {
    return {Kind::cosine, base, final, total, warmup};
  }
  static Schedule linear_then_const(double base, double final, int64_t total, int64_t ramp) {
    return {Kind::linear_then_const, base, final, total, ramp};
  }

  double value(int64_t t) const {
    if (total_steps <= 0) throw config_error("schedule total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps > total_steps) {
      throw config_error("schedule warmup_steps " + std::to_string(warmup_steps) + " outside [0, total_steps]");
    }
    if (t < 0 || t > total_steps) {
      throw config_error("schedule evaluated at step " + std::to_string(t) + " outside [0, " +
                         std::to_string(total_steps) + "]");
    }
    if (kind == Kind::linear_then_const) {
      if (t >= warmup_steps) return final;
      return base + (final - base) * (double)t / (double)warmup_steps;
    }
    if (t < warmup_steps) return base * (double)t / (double)warmup_steps;
    if (total_steps == warmup_steps) return base;  // degenerate: warmup fills the whole run
    const double progress = (double)(t - warmup_steps) / (double)(total_steps - warmup_steps);
    return final + 0.5 * (base - final) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

}  // namespace bcssl
