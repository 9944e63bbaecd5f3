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
#include <numeric>
#include <string>
#include <vector>

#include "bcssl/common.hpp"

namespace bcssl {

// Dense row-major n-d tensor. Shapes use int dims; data is a flat vector.
// Convention for 4-d activations is NCHW, for conv weights [Cout, Cin/groups, kh, kw].
template <typename S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims) : shape(std::move(dims)), data(checked_numel(shape), S(0)) {}
  Tensor(std::vector<int> dims, std::vector<S> values) : shape(std::move(dims)), data(std::move(values)) {
    if ((int64_t)data.size() != checked_numel(shape)) {
      throw shape_error("tensor data size " + std::to_string(data.size()) +
                        " does not match shape (numel " + std::to_string(checked_numel(shape)) + ")");
    }
  }

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }
  static Tensor full(std::vector<int> dims, S v) {
    Tensor t(std::move(dims));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor ones(std::vector<int> dims) { return full(std::move(dims), S(1)); }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  int64_t numel() const { return (int64_t)data.size(); }
  int ndim() const { return (int)shape.size(); }
  int dim(int i) const { return shape[(size_t)i]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  // Element access for the common ranks. No bounds checks in release builds.
  S& operator()(int a) { return data[(size_t)a]; }
  S operator()(int a) const { return data[(size_t)a]; }
  S& operator()(int a, int b) { return data[(size_t)a * shape[1] + b]; }
  S operator()(int a, int b) const { return data[(size_t)a * shape[1] + b]; }
  S& operator()(int a, int b, int c) { return data[((size_t)a * shape[1] + b) * shape[2] + c]; }
  S operator()(int a, int b, int c) const { return data[((size_t)a * shape[1] + b) * shape[2] + c]; }
  S& operator()(int a, int b, int c, int d) {
    return data[(((size_t)a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  S operator()(int a, int b, int c, int d) const {
    return data[(((size_t)a * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }

  Tensor reshaped(std::vector<int> dims) const {
    if (checked_numel(dims) != numel()) {
      throw shape_error("reshape from " + shape_str(shape) + " to " + shape_str(dims) + " changes numel");
    }
    Tensor t = *this;
    t.shape = std::move(dims);
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t;
    t.shape = shape;
    t.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) t.data[i] = (T)data[i];
    return t;
  }

  static int64_t checked_numel(const std::vector<int>& dims) {
    int64_t n = 1;
    for (int d : dims) {
      if (d < 0) throw shape_error("negative dimension in shape " + shape_str(dims));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& dims) {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
  }
};

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* where) {
  if (!a.same_shape(b)) {
    throw shape_error(std::string(where) + ": shapes " + Tensor<S>::shape_str(a.shape) + " and " +
                      Tensor<S>::shape_str(b.shape) + " differ");
  }
}

// y += x, elementwise.
template <typename S>
void axpy(Tensor<S>& y, const Tensor<S>& x, S alpha = S(1)) {
  check_same_shape(y, x, "axpy");
  S* yp = y.ptr();
  const S* xp = x.ptr();
  for (int64_t i = 0; i < y.numel(); ++i) yp[i] += alpha * xp[i];
}

template <typename S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs((double)a.data[(size_t)i] - (double)b.data[(size_t)i]));
  return m;
}

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.ptr(), b.ptr(), sizeof(S) * (size_t)a.numel()) == 0;
}

}  // namespace bcssl
