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

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "bcssl/rng.hpp"
#include "bcssl/tensor.hpp"

namespace bcssl {

// A trainable tensor with gradient and AdamW moment buffers, all shaped like
// value. Names are hierarchical dotted paths (e.g. "stage0.block1.dw.weight")
// and double as RNG keys for initialization and as checkpoint record names.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> opt_m;
  Tensor<S> opt_v;
  bool trainable = true;
  bool grad_populated = false;

  void zero_grad() {
    std::fill(grad.data.begin(), grad.data.end(), S(0));
    grad_populated = false;
  }
};

// Owning, ordered collection of Parameters. Registration order is the
// canonical iteration order everywhere (optimizer, checkpoints), which keeps
// every whole-model reduction and serialization deterministic.
template <typename S>
class ParamSet {
 public:
  Parameter<S>& create(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw shape_error("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->value = Tensor<S>(shape);
    p->grad = Tensor<S>(shape);
    p->opt_m = Tensor<S>(shape);
    p->opt_v = Tensor<S>(std::move(shape));
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  Parameter<S>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw shape_error("unknown parameter '" + name + "'");
  }

  std::vector<Parameter<S>*> all() const {
    std::vector<Parameter<S>*> out;
    out.reserve(items_.size());
    for (auto& p : items_) out.push_back(p.get());
    return out;
  }

  size_t size() const { return items_.size(); }
  int64_t total_numel() const {
    int64_t n = 0;
    for (auto& p : items_) n += p->value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_) p->zero_grad();
  }

  // Truncated-normal(0.02, +/-2 sd) init keyed by (seed, name) so the result
  // does not depend on registration order.
  static void init_trunc_normal(Parameter<S>& p, uint64_t seed, double stddev = 0.02) {
    Rng r(Rng::key_of(seed, p.name));
    for (auto& v : p.value.data) v = (S)r.trunc_normal(stddev, -2 * stddev, 2 * stddev);
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace bcssl
