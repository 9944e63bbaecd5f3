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

#include <catch2/catch_amalgamated.hpp>

#include "bcssl/optim.hpp"
#include "bcssl/schedules.hpp"
#include "oracles.hpp"

using namespace bcssl;

namespace {
template <typename S>
Parameter<S>& make_param(ParamSet<S>& ps, const std::string& name, std::vector<int> shape, uint64_t key) {
  auto& p = ps.create(name, std::move(shape));
  Rng r(key);
  for (auto& v : p.value.data) v = (S)r.normal();
  return p;
}

template <typename S>
void set_grad(Parameter<S>& p, uint64_t key) {
  Rng r(key);
  for (auto& v : p.grad.data) v = (S)r.normal();
  p.grad_populated = true;
}
}  // namespace

TEST_CASE("adamw first step matches the closed form") {
  // After one step from zero moments: m = (1-b1)g, v = (1-b2)g^2, and with
  // bias correction the update is exactly -lr * g/(|g| + eps') ~ -lr*sign(g).
  ParamSet<double> ps;
  auto& p = make_param(ps, "w", {4}, 1);
  auto before = p.value;
  p.grad = Tensor<double>({4}, {0.5, -0.25, 2.0, -1e-3});
  p.grad_populated = true;

  const double lr = 1e-3;
  adamw_step<double>(ps.all(), lr, 0.0, 1);

  for (int i = 0; i < 4; ++i) {
    const double g = p.grad(i);
    const double mhat = (1 - 0.9) * g / (1 - 0.9);
    const double vhat = (1 - 0.999) * g * g / (1 - 0.999);
    const double want = before(i) - lr * mhat / (std::sqrt(vhat) + 1e-8);
    REQUIRE(p.value(i) == Catch::Approx(want).epsilon(1e-14));
  }
}

TEST_CASE("adamw decoupled weight decay multiplies values before the update") {
  ParamSet<double> ps;
  auto& w = make_param(ps, "w", {3, 3}, 2);   // 2-d: decayed
  auto& b = make_param(ps, "w.bias", {3}, 3); // 1-d + .bias: exempt
  auto w0 = w.value, b0 = b.value;
  // Zero grads isolate the decay term.
  w.grad_populated = b.grad_populated = true;

  const double lr = 0.1, wd = 0.4;
  adamw_step<double>(ps.all(), lr, wd, 1);
  for (int64_t i = 0; i < w.value.numel(); ++i)
    REQUIRE(w.value.data[(size_t)i] == Catch::Approx(w0.data[(size_t)i] * (1 - lr * wd)).epsilon(1e-14));
  for (int64_t i = 0; i < b.value.numel(); ++i) REQUIRE(b.value.data[(size_t)i] == b0.data[(size_t)i]);
}

TEST_CASE("adamw with lr = 0 is the identity on values but moves moments") {
  ParamSet<float> ps;
  auto& p = make_param(ps, "w", {8, 8}, 4);
  set_grad(p, 5);
  auto v0 = p.value;
  adamw_step<float>(ps.all(), 0.0, 0.4, 1);
  REQUIRE(bitwise_equal(p.value, v0));
  bool moments_moved = false;
  for (auto m : p.opt_m.data) moments_moved = moments_moved || m != 0.f;
  REQUIRE(moments_moved);
}

TEST_CASE("optimizer rejects missing gradients and frozen params are skipped") {
  ParamSet<double> ps;
  auto& a = make_param(ps, "a", {2}, 6);
  auto& frozen = make_param(ps, "frozen", {2}, 7);
  frozen.trainable = false;
  auto f0 = frozen.value;

  REQUIRE_THROWS_AS(adamw_step<double>(ps.all(), 1e-3, 0.0, 1), shape_error);

  set_grad(a, 8);
  adamw_step<double>(ps.all(), 1e-3, 0.0, 1);  // frozen never needs a grad
  REQUIRE(bitwise_equal(frozen.value, f0));
}

TEST_CASE("sgd momentum matches the reference recurrence") {
  ParamSet<double> ps;
  auto& p = make_param(ps, "w", {3}, 9);
  auto v = p.value;
  Tensor<double> buf({3});
  const double lr = 0.01, mom = 0.9;
  for (int step = 0; step < 5; ++step) {
    set_grad(p, 100 + (uint64_t)step);
    sgd_step<double>(ps.all(), lr, mom);
    for (int i = 0; i < 3; ++i) {
      buf(i) = mom * buf(i) + p.grad(i);
      v(i) -= lr * buf(i);
      REQUIRE(p.value(i) == Catch::Approx(v(i)).epsilon(1e-14));
    }
  }
}

TEST_CASE("grad clipping rescales to the threshold and reports the pre-clip norm") {
  ParamSet<double> ps;
  auto& a = make_param(ps, "a", {3}, 11);
  auto& b = make_param(ps, "b", {2}, 12);
  a.grad = Tensor<double>({3}, {3.0, 0.0, 4.0});  // norm 5 in a alone
  b.grad = Tensor<double>({2}, {0.0, 12.0});      // total norm 13
  a.grad_populated = b.grad_populated = true;

  const double norm = clip_grad_norm(ps.all(), 3.0);
  REQUIRE(norm == Catch::Approx(13.0).epsilon(1e-12));
  REQUIRE(global_grad_norm(ps.all()) == Catch::Approx(3.0).epsilon(1e-12));
  // Direction preserved.
  REQUIRE(a.grad(0) / a.grad(2) == Catch::Approx(0.75).epsilon(1e-12));

  // Below the threshold nothing changes.
  const double norm2 = clip_grad_norm(ps.all(), 100.0);
  REQUIRE(norm2 == Catch::Approx(3.0).epsilon(1e-12));
  REQUIRE(global_grad_norm(ps.all()) == Catch::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("cosine schedule endpoints, warmup, and midpoint") {
  auto s = Schedule::cosine(1.0, 0.1, 1000, 100);
  REQUIRE(s.value(0) == 0.0);                                // warmup starts at 0
  REQUIRE(s.value(50) == Catch::Approx(0.5));                // linear ramp
  REQUIRE(s.value(100) == Catch::Approx(1.0));               // reaches base
  REQUIRE(s.value(550) == Catch::Approx(0.55).epsilon(1e-12));  // cosine midpoint = (base+final)/2
  REQUIRE(s.value(1000) == Catch::Approx(0.1).epsilon(1e-12));  // ends at final
  // Monotone non-increasing after warmup.
  double prev = s.value(100);
  for (int64_t t = 101; t <= 1000; t += 7) {
    REQUIRE(s.value(t) <= prev + 1e-15);
    prev = s.value(t);
  }
  REQUIRE_THROWS_AS(s.value(-1), config_error);
  REQUIRE_THROWS_AS(s.value(1001), config_error);
}

TEST_CASE("linear_then_const schedule ramps then holds") {
  // Teacher temperature shape: 0.04 -> 0.07 over 30 epochs, then constant.
  auto s = Schedule::linear_then_const(0.04, 0.07, 100, 30);
  REQUIRE(s.value(0) == Catch::Approx(0.04));
  REQUIRE(s.value(15) == Catch::Approx(0.055).epsilon(1e-12));
  REQUIRE(s.value(30) == Catch::Approx(0.07));
  REQUIRE(s.value(100) == Catch::Approx(0.07));
}

TEST_CASE("ema lambda cosine rises from base to one") {
  auto s = Schedule::cosine(0.996, 1.0, 400, 0);
  REQUIRE(s.value(0) == Catch::Approx(0.996));
  REQUIRE(s.value(400) == Catch::Approx(1.0));
  double prev = s.value(0);
  for (int64_t t = 1; t <= 400; ++t) {
    REQUIRE(s.value(t) >= prev - 1e-15);
    prev = s.value(t);
  }
}

TEST_CASE("learning-rate schedule composes warmup with cosine decay to near zero") {
  // 100-epoch runs use a 10-epoch warmup; final lr 1e-6.
  const int64_t total = 400, warm = 40;
  auto s = Schedule::cosine(5e-4, 1e-6, total, warm);
  REQUIRE(s.value(0) == 0.0);
  REQUIRE(s.value(warm) == Catch::Approx(5e-4));
  REQUIRE(s.value(total) == Catch::Approx(1e-6));
  REQUIRE(s.value(warm / 2) == Catch::Approx(2.5e-4));
}
