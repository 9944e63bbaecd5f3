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

#include <utility>

#include "bcssl/autograd.hpp"

namespace bcssl {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  int64_t worst_index = -1;
  double analytic = 0;
  double numeric = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_err() const {
    double m = 0;
    for (auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  const GradCheckEntry& worst() const {
    size_t w = 0;
    for (size_t i = 1; i < entries.size(); ++i)
      if (entries[i].max_rel_err > entries[w].max_rel_err) w = i;
    return entries[w];
  }
  bool passed(double tol) const { return max_rel_err() <= tol; }
  std::string summary() const {
    std::string s;
    for (auto& e : entries) {
      s += detail::strf("%-28s max_rel_err=%.3e at [%lld] (analytic=%.6e numeric=%.6e)\n", e.name.c_str(),
                        e.max_rel_err, (long long)e.worst_index, e.analytic, e.numeric);
    }
    return s;
  }
};

// Central-difference gradient check, double precision. `build` receives a
// tape plus the node ids of the registered inputs (in registration order) and
// must return the id of a scalar loss node. It is re-invoked for every
// perturbed evaluation, so it must be a pure function of the input tensors
// (state side effects like BN running-stat updates are tolerated because they
// never feed back into the same forward pass).
//
// Relative error is |a - n| / max(1, |a|, |n|), reported per input.
class GradCheck {
 public:
  void add_input(const std::string& name, Tensor<double> value) { inputs_.emplace_back(name, std::move(value)); }

  template <typename Build>
  GradCheckReport run(Build&& build, double h = 1e-5) {
    if (inputs_.empty()) throw shape_error("grad_check: no inputs registered");

    std::vector<Tensor<double>> analytic;
    {
      Tape<double> tape(true);
      std::vector<int> ids;
      ids.reserve(inputs_.size());
      for (auto& [name, v] : inputs_) ids.push_back(tape.input(v));
      int root = build(tape, ids);
      if (tape.val(root).numel() != 1) throw shape_error("grad_check: build must return a scalar node");
      tape.backward(root);
      for (int id : ids) analytic.push_back(tape.has_grad(id) ? tape.grad(id) : Tensor<double>(tape.shape(id)));
    }

    auto eval = [&](size_t which, int64_t idx, double delta) {
      Tape<double> tape(false);
      std::vector<int> ids;
      ids.reserve(inputs_.size());
      for (size_t i = 0; i < inputs_.size(); ++i) {
        Tensor<double> v = inputs_[i].second;
        if (i == which) v.data[(size_t)idx] += delta;
        ids.push_back(tape.constant(std::move(v)));
      }
      return tape.val(build(tape, ids)).data[0];
    };

    GradCheckReport report;
    for (size_t i = 0; i < inputs_.size(); ++i) {
      GradCheckEntry e;
      e.name = inputs_[i].first;
      for (int64_t j = 0; j < inputs_[i].second.numel(); ++j) {
        const double numeric = (eval(i, j, +h) - eval(i, j, -h)) / (2 * h);
        const double a = analytic[i].data[(size_t)j];
        const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (rel > e.max_rel_err) {
          e.max_rel_err = rel;
          e.worst_index = j;
          e.analytic = a;
          e.numeric = numeric;
        }
      }
      report.entries.push_back(std::move(e));
    }
    return report;
  }

 private:
  std::vector<std::pair<std::string, Tensor<double>>> inputs_;
};

}  // namespace bcssl
