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

#include <functional>

#include "bcssl/params.hpp"

namespace bcssl {

// Parameters with ndim <= 1 (biases, norm gains/shifts, layer scales,
// weight-norm gains) are exempt from weight decay.
template <typename S>
bool default_decay_exempt(const Parameter<S>& p) {
  return p.value.ndim() <= 1 || p.name.ends_with(".bias");
}

template <typename S>
void require_grads(const std::vector<Parameter<S>*>& params, const char* who) {
  for (auto* p : params) {
    if (p->trainable && !p->grad_populated) {
      throw shape_error(std::string(who) + ": parameter '" + p->name +
                        "' has no populated gradient (backward not run or grads cleared)");
    }
  }
}

// Global L2 norm over all trainable gradients, accumulated in double in
// parameter registration order.
template <typename S>
double global_grad_norm(const std::vector<Parameter<S>*>& params) {
  double sq = 0;
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (S g : p->grad.data) sq += (double)g * (double)g;
  }
  return std::sqrt(sq);
}

// Scales all gradients by max_norm/norm when norm > max_norm; returns the
// pre-clip norm.
template <typename S>
double clip_grad_norm(const std::vector<Parameter<S>*>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const S scale = (S)(max_norm / norm);
    for (auto* p : params) {
      if (!p->trainable) continue;
      for (auto& g : p->grad.data) g *= scale;
    }
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled AdamW. Weight decay multiplies the value by (1 - lr*wd) before
// the Adam update; bias correction uses the global 1-based step count t.
// With lr == 0 the value update is exactly the identity (moments still move).
template <typename S>
void adamw_step(const std::vector<Parameter<S>*>& params, double lr, double weight_decay, int64_t t,
                const AdamWConfig& cfg = {},
                const std::function<bool(const Parameter<S>&)>& decay_exempt = default_decay_exempt<S>) {
  if (t < 1) throw shape_error("adamw_step: step count must be >= 1");
  require_grads(params, "adamw_step");
  const double bc1 = 1.0 - std::pow(cfg.beta1, (double)t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, (double)t);
  for (auto* p : params) {
    if (!p->trainable) continue;
    const bool decay = weight_decay != 0 && !decay_exempt(*p);
    const S decay_mult = (S)(1.0 - lr * weight_decay);
    S* v = p->value.ptr();
    S* g = p->grad.ptr();
    S* m = p->opt_m.ptr();
    S* vv = p->opt_v.ptr();
    const int64_t n = p->value.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (decay) v[i] *= decay_mult;
      m[i] = (S)(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      vv[i] = (S)(cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * (double)g[i] * (double)g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = vv[i] / bc2;
      v[i] -= (S)(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// SGD with (heavy-ball) momentum; buffer lives in opt_m. Weight decay is the
// classic L2 term added to the gradient for non-exempt parameters.
template <typename S>
void sgd_step(const std::vector<Parameter<S>*>& params, double lr, double momentum, double weight_decay = 0,
              const std::function<bool(const Parameter<S>&)>& decay_exempt = default_decay_exempt<S>) {
  require_grads(params, "sgd_step");
  for (auto* p : params) {
    if (!p->trainable) continue;
    const bool decay = weight_decay != 0 && !decay_exempt(*p);
    S* v = p->value.ptr();
    S* g = p->grad.ptr();
    S* buf = p->opt_m.ptr();
    const int64_t n = p->value.numel();
    for (int64_t i = 0; i < n; ++i) {
      S gi = g[i];
      if (decay) gi += (S)weight_decay * v[i];
      buf[i] = (S)(momentum * buf[i]) + gi;
      v[i] -= (S)lr * buf[i];
    }
  }
}

}  // namespace bcssl
