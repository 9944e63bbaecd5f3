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

#include "bcssl/ops.hpp"
#include "bcssl/params.hpp"

namespace bcssl {

// Reverse-mode tape. Nodes are identified by creation index; every op's
// parents precede it, so backward() is a single reverse sweep. Gradients
// accumulate with += across fan-out in node-creation order, which fixes the
// reduction order and keeps repeated runs bitwise identical.
//
// Values of interior nodes are released as the sweep passes them (a node's
// value can only be needed by backward functions of later nodes), which
// roughly halves peak memory during training. Leaf nodes keep their grads so
// callers can read input gradients after backward().
template <typename S>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  using BackwardFn = std::function<void(Tape&, int self)>;

  bool grad_enabled() const { return grad_enabled_; }

  // Untracked constant leaf.
  int constant(Tensor<S> v) { return push(std::move(v), false, nullptr); }

  // Tracked leaf; its gradient is available after backward().
  int input(Tensor<S> v) { return push(std::move(v), grad_enabled_, nullptr); }

  // Leaf bound to a Parameter; param.grad accumulates on backward(). Repeat
  // calls for the same Parameter return the same node.
  int param(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    int id = push(p.value, grad_enabled_ && p.trainable, nullptr);
    nodes_[(size_t)id].bound = &p;
    param_nodes_[&p] = id;
    return id;
  }

  // Interior node. backward_fn may be empty for ops with no differentiable
  // inputs; it is dropped entirely when no parent needs a gradient.
  int make_node(Tensor<S> value, std::initializer_list<int> parents, BackwardFn backward_fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (int p : parents) needs = needs || nodes_[(size_t)p].needs_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward_fn) : nullptr);
  }

  const Tensor<S>& val(int id) const { return nodes_[(size_t)id].value; }
  const std::vector<int>& shape(int id) const { return nodes_[(size_t)id].value.shape; }
  bool needs_grad(int id) const { return nodes_[(size_t)id].needs_grad; }

  // Gradient of a leaf (or any retained node) after backward().
  const Tensor<S>& grad(int id) const {
    const Node& n = nodes_[(size_t)id];
    if (!n.has_grad) throw shape_error("node has no gradient (not reached by backward, or released)");
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[(size_t)id].has_grad; }

  void accum_grad(int id, Tensor<S> g) {
    Node& n = nodes_[(size_t)id];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = std::move(g);
      n.has_grad = true;
    } else {
      axpy(n.grad, g);
    }
  }

  // Runs the reverse sweep from a scalar root and folds leaf grads into their
  // bound Parameters.
  void backward(int root) {
    if (!grad_enabled_) throw shape_error("backward() on a grad-disabled tape");
    Node& r = nodes_[(size_t)root];
    if (r.value.numel() != 1) throw shape_error("backward root must be scalar");
    if (!r.needs_grad) throw shape_error("backward root does not depend on any tracked input");
    accum_grad(root, Tensor<S>::ones(r.value.shape));
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[(size_t)id];
      if (n.backward_fn && n.has_grad) n.backward_fn(*this, id);
      if (n.backward_fn) {
        // Interior node: neither its value nor its grad can be needed again.
        n.value = Tensor<S>();
        n.grad = Tensor<S>();
        n.has_grad = false;
      }
    }
    for (auto& [p, id] : param_nodes_) {
      Node& n = nodes_[(size_t)id];
      if (n.has_grad) {
        axpy(p->grad, n.grad);
        p->grad_populated = true;
      }
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    BackwardFn backward_fn;
    Parameter<S>* bound = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
  };

  int push(Tensor<S> v, bool needs, BackwardFn fn) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs;
    n.backward_fn = std::move(fn);
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<S>*, int> param_nodes_;
  bool grad_enabled_;
};

// Op builders over the tape. Each forwards through ops:: and registers a
// backward that routes cotangents to the parents it saw.
namespace ag {

template <typename S>
int conv2d(Tape<S>& t, int x, int w, int b, const ops::ConvSpec& spec) {
  const Tensor<S>* bias = b >= 0 ? &t.val(b) : nullptr;
  Tensor<S> y = ops::conv2d(t.val(x), t.val(w), bias, spec);
  const bool has_bias = b >= 0;
  return t.make_node(std::move(y), has_bias ? std::initializer_list<int>{x, w, b} : std::initializer_list<int>{x, w},
                     [x, w, b, has_bias, spec](Tape<S>& tp, int self) {
                       Tensor<S> gx, gw, gb;
                       const bool want_x = tp.needs_grad(x);
                       ops::conv2d_backward(tp.val(x), tp.val(w), has_bias, spec, tp.grad(self),
                                            want_x ? &gx : nullptr, &gw, has_bias ? &gb : nullptr);
                       if (want_x) tp.accum_grad(x, std::move(gx));
                       tp.accum_grad(w, std::move(gw));
                       if (has_bias) tp.accum_grad(b, std::move(gb));
                     });
}

// Running stats live outside the tape and are mutated here when training.
template <typename S>
int batch_norm(Tape<S>& t, int x, int gamma, int beta, Tensor<S>& running_mean, Tensor<S>& running_var, S momentum,
               S eps, bool training) {
  Tensor<S> mean, invstd;
  Tensor<S> y =
      ops::batch_norm(t.val(x), t.val(gamma), t.val(beta), running_mean, running_var, momentum, eps, training, &mean,
                      &invstd);
  return t.make_node(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, training, mean = std::move(mean), invstd = std::move(invstd)](Tape<S>& tp,
                                                                                                    int self) {
                       Tensor<S> gx, gg, gb;
                       ops::batch_norm_backward(tp.val(x), tp.val(gamma), mean, invstd, training, tp.grad(self),
                                                tp.needs_grad(x) ? &gx : nullptr, &gg, &gb);
                       if (tp.needs_grad(x)) tp.accum_grad(x, std::move(gx));
                       tp.accum_grad(gamma, std::move(gg));
                       tp.accum_grad(beta, std::move(gb));
                     });
}

template <typename S>
int layer_norm(Tape<S>& t, int x, int gamma, int beta, S eps) {
  Tensor<S> mean, invstd;
  Tensor<S> y = ops::layer_norm(t.val(x), t.val(gamma), t.val(beta), eps, &mean, &invstd);
  return t.make_node(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, mean = std::move(mean), invstd = std::move(invstd)](Tape<S>& tp, int self) {
                       Tensor<S> gx, gg, gb;
                       ops::layer_norm_backward(tp.val(x), tp.val(gamma), mean, invstd, tp.grad(self),
                                                tp.needs_grad(x) ? &gx : nullptr, &gg, &gb);
                       if (tp.needs_grad(x)) tp.accum_grad(x, std::move(gx));
                       tp.accum_grad(gamma, std::move(gg));
                       tp.accum_grad(beta, std::move(gb));
                     });
}

template <typename S>
int gelu(Tape<S>& t, int x) {
  return t.make_node(ops::gelu(t.val(x)), {x}, [x](Tape<S>& tp, int self) {
    Tensor<S> gx;
    ops::gelu_backward(tp.val(x), tp.grad(self), &gx);
    tp.accum_grad(x, std::move(gx));
  });
}

template <typename S>
int linear(Tape<S>& t, int x, int w, int b) {
  const Tensor<S>* bias = b >= 0 ? &t.val(b) : nullptr;
  const bool has_bias = b >= 0;
  return t.make_node(ops::linear(t.val(x), t.val(w), bias),
                     has_bias ? std::initializer_list<int>{x, w, b} : std::initializer_list<int>{x, w},
                     [x, w, b, has_bias](Tape<S>& tp, int self) {
                       Tensor<S> gx, gw, gb;
                       ops::linear_backward(tp.val(x), tp.val(w), has_bias, tp.grad(self),
                                            tp.needs_grad(x) ? &gx : nullptr, &gw, has_bias ? &gb : nullptr);
                       if (tp.needs_grad(x)) tp.accum_grad(x, std::move(gx));
                       tp.accum_grad(w, std::move(gw));
                       if (has_bias) tp.accum_grad(b, std::move(gb));
                     });
}

template <typename S>
int weight_norm_linear(Tape<S>& t, int x, int dir, int gain) {
  return t.make_node(ops::weight_norm_linear(t.val(x), t.val(dir), t.val(gain), (Tensor<S>*)nullptr),
                     {x, dir, gain}, [x, dir, gain](Tape<S>& tp, int self) {
                       Tensor<S> gx, gd, gg;
                       ops::weight_norm_linear_backward(tp.val(x), tp.val(dir), tp.val(gain), tp.grad(self),
                                                        tp.needs_grad(x) ? &gx : nullptr, &gd, &gg);
                       if (tp.needs_grad(x)) tp.accum_grad(x, std::move(gx));
                       tp.accum_grad(dir, std::move(gd));
                       tp.accum_grad(gain, std::move(gg));
                     });
}

template <typename S>
int log_softmax(Tape<S>& t, int x, S temperature) {
  return t.make_node(ops::log_softmax(t.val(x), temperature), {x}, [x, temperature](Tape<S>& tp, int self) {
    Tensor<S> gx;
    ops::log_softmax_backward(tp.val(self), temperature, tp.grad(self), &gx);
    tp.accum_grad(x, std::move(gx));
  });
}

template <typename S>
int global_avg_pool(Tape<S>& t, int x) {
  return t.make_node(ops::global_avg_pool(t.val(x)), {x}, [x, xshape = t.shape(x)](Tape<S>& tp, int self) {
    Tensor<S> gx;
    ops::global_avg_pool_backward(xshape, tp.grad(self), &gx);
    tp.accum_grad(x, std::move(gx));
  });
}

template <typename S>
int l2_normalize(Tape<S>& t, int x, S eps) {
  return t.make_node(ops::l2_normalize(t.val(x), eps), {x}, [x, eps](Tape<S>& tp, int self) {
    Tensor<S> gx;
    ops::l2_normalize_backward(tp.val(x), eps, tp.grad(self), &gx);
    tp.accum_grad(x, std::move(gx));
  });
}

template <typename S>
int add(Tape<S>& t, int a, int b) {
  check_same_shape(t.val(a), t.val(b), "ag::add");
  Tensor<S> y = t.val(a);
  axpy(y, t.val(b));
  return t.make_node(std::move(y), {a, b}, [a, b](Tape<S>& tp, int self) {
    if (tp.needs_grad(a)) tp.accum_grad(a, tp.grad(self));
    if (tp.needs_grad(b)) tp.accum_grad(b, tp.grad(self));
  });
}

// y[n,c,h,w] = x[n,c,h,w] * s[c]  (layer scale).
template <typename S>
int scale_channels(Tape<S>& t, int x, int s) {
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& sv = t.val(s);
  if (xv.ndim() != 4 || sv.numel() != xv.dim(1)) throw shape_error("scale_channels: shape mismatch");
  const int n = xv.dim(0), c = xv.dim(1);
  const int64_t plane = (int64_t)xv.dim(2) * xv.dim(3);
  Tensor<S> y(xv.shape);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const S sc = sv.data[(size_t)ci];
      const S* src = xv.ptr() + ((size_t)ni * c + ci) * plane;
      S* dst = y.ptr() + ((size_t)ni * c + ci) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * sc;
    }
  return t.make_node(std::move(y), {x, s}, [x, s, n, c, plane](Tape<S>& tp, int self) {
    const Tensor<S>& gy = tp.grad(self);
    const Tensor<S>& xv2 = tp.val(x);
    const Tensor<S>& sv2 = tp.val(s);
    if (tp.needs_grad(x)) {
      Tensor<S> gx(xv2.shape);
      for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
          const S sc = sv2.data[(size_t)ci];
          const S* g = gy.ptr() + ((size_t)ni * c + ci) * plane;
          S* dst = gx.ptr() + ((size_t)ni * c + ci) * plane;
          for (int64_t i = 0; i < plane; ++i) dst[i] = g[i] * sc;
        }
      tp.accum_grad(x, std::move(gx));
    }
    Tensor<S> gs({c});
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        const S* g = gy.ptr() + ((size_t)ni * c + ci) * plane;
        const S* src = xv2.ptr() + ((size_t)ni * c + ci) * plane;
        S acc = gs.data[(size_t)ci];
        for (int64_t i = 0; i < plane; ++i) acc += g[i] * src[i];
        gs.data[(size_t)ci] = acc;
      }
    tp.accum_grad(s, std::move(gs));
  });
}

// Stochastic depth on the residual branch: y[n] = x[n] * keep[n], where
// keep[n] is 0 or 1/(1-rate), sampled by the caller. rate == 0 bypasses the
// node entirely.
template <typename S>
int drop_path(Tape<S>& t, int x, const Tensor<S>& keep) {
  const Tensor<S>& xv = t.val(x);
  if (keep.numel() != xv.dim(0)) throw shape_error("drop_path: keep mask must have one entry per sample");
  const int n = xv.dim(0);
  const int64_t rest = xv.numel() / n;
  Tensor<S> y(xv.shape);
  for (int ni = 0; ni < n; ++ni) {
    const S k = keep.data[(size_t)ni];
    const S* src = xv.ptr() + (size_t)ni * rest;
    S* dst = y.ptr() + (size_t)ni * rest;
    for (int64_t i = 0; i < rest; ++i) dst[i] = src[i] * k;
  }
  return t.make_node(std::move(y), {x}, [x, keep, n, rest](Tape<S>& tp, int self) {
    const Tensor<S>& gy = tp.grad(self);
    Tensor<S> gx(gy.shape);
    for (int ni = 0; ni < n; ++ni) {
      const S k = keep.data[(size_t)ni];
      const S* src = gy.ptr() + (size_t)ni * rest;
      S* dst = gx.ptr() + (size_t)ni * rest;
      for (int64_t i = 0; i < rest; ++i) dst[i] = src[i] * k;
    }
    tp.accum_grad(x, std::move(gx));
  });
}

template <typename S>
int cross_entropy_with_probs(Tape<S>& t, int logp, int probs) {
  S loss = ops::cross_entropy_with_probs(t.val(logp), t.val(probs));
  return t.make_node(Tensor<S>::scalar(loss), {logp}, [logp, probs](Tape<S>& tp, int self) {
    Tensor<S> glogp;
    ops::cross_entropy_with_probs_backward(tp.val(probs), tp.grad(self).data[0], &glogp);
    tp.accum_grad(logp, std::move(glogp));
  });
}

template <typename S>
int nll_loss(Tape<S>& t, int logp, std::vector<int> labels) {
  S loss = ops::nll_loss(t.val(logp), labels);
  const int k = t.shape(logp)[1];
  return t.make_node(Tensor<S>::scalar(loss), {logp}, [logp, k, labels = std::move(labels)](Tape<S>& tp, int self) {
    Tensor<S> glogp;
    ops::nll_loss_backward(labels, k, tp.grad(self).data[0], &glogp);
    tp.accum_grad(logp, std::move(glogp));
  });
}

// <x, weights> with a constant weight tensor; weights == ones gives a plain
// sum. Serves as the scalar readout for gradient checks and receptive-field
// probes.
template <typename S>
int inner(Tape<S>& t, int x, Tensor<S> weights) {
  check_same_shape(t.val(x), weights, "ag::inner");
  const Tensor<S>& xv = t.val(x);
  S acc = 0;
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv.data[(size_t)i] * weights.data[(size_t)i];
  return t.make_node(Tensor<S>::scalar(acc), {x}, [x, weights = std::move(weights)](Tape<S>& tp, int self) {
    const S g = tp.grad(self).data[0];
    Tensor<S> gx(weights.shape);
    for (int64_t i = 0; i < gx.numel(); ++i) gx.data[(size_t)i] = g * weights.data[(size_t)i];
    tp.accum_grad(x, std::move(gx));
  });
}

// Scales a scalar node (used to weight per-view loss terms).
template <typename S>
int scale(Tape<S>& t, int x, S factor) {
  Tensor<S> y = t.val(x);
  for (auto& v : y.data) v *= factor;
  return t.make_node(std::move(y), {x}, [x, factor](Tape<S>& tp, int self) {
    Tensor<S> g = tp.grad(self);
    for (auto& v : g.data) v *= factor;
    tp.accum_grad(x, std::move(g));
  });
}

}  // namespace ag
}  // namespace bcssl
