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

#include <array>
#include <optional>

#include "bcssl/autograd.hpp"

namespace bcssl {

// Four-stage hierarchical conv backbone. Each block is
//   x + drop_path(layer_scale * PW2(GELU(PW1(LN(BN?(DW_k(x)))))))
// with a depthwise k x k conv (k = 9 by default), an optional BatchNorm
// inserted between the depthwise conv and the existing channel LayerNorm, and
// a 4x inverted-bottleneck MLP. The stem is a patchify conv (stride = kernel
// = stem_patch) followed by LN; stage transitions are LN + 2x2 stride-2 conv;
// the pooled embedding is LN(GAP(last stage map)).
struct BackboneConfig {
  std::string variant = "nano";
  std::array<int, 4> depths{2, 2, 6, 2};
  std::array<int, 4> dims{32, 64, 128, 256};
  int kernel_size = 9;
  bool use_bn_after_dw = true;
  int stem_patch = 4;
  double layer_scale_init = 1e-6;
  double drop_path_rate = 0.0;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double ln_eps = 1e-6;

  static BackboneConfig nano(int kernel = 9, bool bn = true) {
    BackboneConfig c;
    c.variant = "nano";
    c.depths = {2, 2, 6, 2};
    c.dims = {32, 64, 128, 256};
    c.kernel_size = kernel;
    c.use_bn_after_dw = bn;
    return c;
  }
  static BackboneConfig tiny(int kernel = 9, bool bn = true) {
    BackboneConfig c;
    c.variant = "tiny";
    c.depths = {3, 3, 9, 3};
    c.dims = {96, 192, 384, 768};
    c.kernel_size = kernel;
    c.use_bn_after_dw = bn;
    return c;
  }

  int feature_dim() const { return dims[3]; }
  int total_blocks() const { return depths[0] + depths[1] + depths[2] + depths[3]; }
  // Total spatial reduction: stem plus three 2x downsamples.
  int reduction() const { return stem_patch * 8; }

  void validate() const {
    for (int d : depths)
      if (d < 1) throw config_error("backbone depths must be >= 1");
    for (int i = 0; i < 3; ++i) {
      if (dims[(size_t)i + 1] != 2 * dims[(size_t)i]) {
        throw config_error("backbone dims must double per stage, got " + std::to_string(dims[(size_t)i]) + " -> " +
                           std::to_string(dims[(size_t)i + 1]));
      }
    }
    if (dims[0] < 1) throw config_error("backbone dims must be positive");
    if (kernel_size < 1 || kernel_size % 2 == 0) {
      throw config_error("depthwise kernel size must be odd, got " + std::to_string(kernel_size));
    }
    if (!(depths[2] >= depths[0] && depths[2] >= depths[1] && depths[2] >= depths[3])) {
      throw config_error("third stage must be the deepest");
    }
    if (stem_patch < 1) throw config_error("stem_patch must be >= 1");
    if (layer_scale_init < 0) throw config_error("layer_scale_init must be >= 0");
    if (drop_path_rate < 0 || drop_path_rate >= 1) throw config_error("drop_path_rate must be in [0, 1)");
  }
};

template <typename S>
struct ConvLayer {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;
  ops::ConvSpec spec;
};

template <typename S>
struct NormLayer {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  S eps = (S)1e-6;
};

template <typename S>
struct BnState {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  Tensor<S> running_mean;
  Tensor<S> running_var;
  S momentum = (S)0.1;
  S eps = (S)1e-5;
};

template <typename S>
struct Block {
  ConvLayer<S> dw;
  std::optional<BnState<S>> bn;
  NormLayer<S> norm;
  ConvLayer<S> pw1, pw2;
  Parameter<S>* layer_scale = nullptr;
  double drop_path_rate = 0.0;
};

template <typename S>
struct Backbone {
  BackboneConfig cfg;
  ParamSet<S> params;
  ConvLayer<S> stem_conv;
  NormLayer<S> stem_norm;
  std::vector<std::vector<Block<S>>> stages;
  struct Down {
    NormLayer<S> norm;
    ConvLayer<S> conv;
  };
  std::vector<Down> downsamples;
  NormLayer<S> final_norm;
  bool training = false;

  Backbone() = default;
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;
  Backbone(Backbone&&) = default;
  Backbone& operator=(Backbone&&) = default;

  // Named non-parameter state (BN running stats), in registration order.
  std::vector<std::pair<std::string, Tensor<S>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<S>*>> out;
    for (size_t s = 0; s < stages.size(); ++s) {
      for (size_t b = 0; b < stages[s].size(); ++b) {
        if (stages[s][b].bn) {
          std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b) + ".bn.";
          out.emplace_back(prefix + "running_mean", &stages[s][b].bn->running_mean);
          out.emplace_back(prefix + "running_var", &stages[s][b].bn->running_var);
        }
      }
    }
    return out;
  }
};

namespace detail {

template <typename S>
ConvLayer<S> make_conv(ParamSet<S>& ps, const std::string& prefix, int cout, int cig, int k, ops::ConvSpec spec,
                       uint64_t seed) {
  ConvLayer<S> layer;
  layer.weight = &ps.create(prefix + ".weight", {cout, cig, k, k});
  ParamSet<S>::init_trunc_normal(*layer.weight, seed);
  layer.bias = &ps.create(prefix + ".bias", {cout});
  layer.spec = spec;
  return layer;
}

template <typename S>
NormLayer<S> make_norm(ParamSet<S>& ps, const std::string& prefix, int c, S eps) {
  NormLayer<S> layer;
  layer.gamma = &ps.create(prefix + ".gamma", {c});
  std::fill(layer.gamma->value.data.begin(), layer.gamma->value.data.end(), S(1));
  layer.beta = &ps.create(prefix + ".beta", {c});
  layer.eps = eps;
  return layer;
}

}  // namespace detail

// Builds a backbone with truncated-normal(0.02) conv weights (keyed by (seed,
// parameter name)), unit norm gains, zero biases/shifts, and layer_scale
// filled with cfg.layer_scale_init. Per-block drop-path rates ramp linearly
// from 0 to cfg.drop_path_rate over the block sequence.
template <typename S>
Backbone<S> build_backbone(const BackboneConfig& cfg, uint64_t seed) {
  cfg.validate();
  Backbone<S> bb;
  bb.cfg = cfg;
  auto& ps = bb.params;

  bb.stem_conv = detail::make_conv(ps, "stem.conv", cfg.dims[0], 3, cfg.stem_patch,
                                   ops::ConvSpec{cfg.stem_patch, 0, 1}, seed);
  bb.stem_norm = detail::make_norm(ps, "stem.norm", cfg.dims[0], (S)cfg.ln_eps);

  const int total_blocks = cfg.total_blocks();
  int block_index = 0;
  bb.stages.resize(4);
  for (int s = 0; s < 4; ++s) {
    if (s > 0) {
      const std::string dprefix = "down" + std::to_string(s);
      typename Backbone<S>::Down down;
      down.norm = detail::make_norm(ps, dprefix + ".norm", cfg.dims[(size_t)s - 1], (S)cfg.ln_eps);
      down.conv = detail::make_conv(ps, dprefix + ".conv", cfg.dims[(size_t)s], cfg.dims[(size_t)s - 1], 2,
                                    ops::ConvSpec{2, 0, 1}, seed);
      bb.downsamples.push_back(std::move(down));
    }
    const int c = cfg.dims[(size_t)s];
    for (int b = 0; b < cfg.depths[(size_t)s]; ++b, ++block_index) {
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      Block<S> blk;
      blk.dw = detail::make_conv(ps, prefix + ".dw", c, 1, cfg.kernel_size,
                                 ops::ConvSpec{1, (cfg.kernel_size - 1) / 2, c}, seed);
      if (cfg.use_bn_after_dw) {
        BnState<S> bn;
        bn.gamma = &ps.create(prefix + ".bn.gamma", {c});
        std::fill(bn.gamma->value.data.begin(), bn.gamma->value.data.end(), S(1));
        bn.beta = &ps.create(prefix + ".bn.beta", {c});
        bn.running_mean = Tensor<S>({c});
        bn.running_var = Tensor<S>::ones({c});
        bn.momentum = (S)cfg.bn_momentum;
        bn.eps = (S)cfg.bn_eps;
        blk.bn = std::move(bn);
      }
      blk.norm = detail::make_norm(ps, prefix + ".norm", c, (S)cfg.ln_eps);
      blk.pw1 = detail::make_conv(ps, prefix + ".pw1", 4 * c, c, 1, ops::ConvSpec{1, 0, 1}, seed);
      blk.pw2 = detail::make_conv(ps, prefix + ".pw2", c, 4 * c, 1, ops::ConvSpec{1, 0, 1}, seed);
      blk.layer_scale = &ps.create(prefix + ".layer_scale", {c});
      std::fill(blk.layer_scale->value.data.begin(), blk.layer_scale->value.data.end(), (S)cfg.layer_scale_init);
      blk.drop_path_rate =
          total_blocks > 1 ? cfg.drop_path_rate * block_index / (total_blocks - 1) : cfg.drop_path_rate;
      bb.stages[(size_t)s].push_back(std::move(blk));
    }
  }
  bb.final_norm = detail::make_norm(ps, "final_norm", cfg.dims[3], (S)cfg.ln_eps);
  return bb;
}

// Structural copy with identical parameter values and running stats.
template <typename S>
Backbone<S> clone_backbone(Backbone<S>& src) {
  Backbone<S> dst = build_backbone<S>(src.cfg, 0);
  for (auto* sp : src.params.all()) {
    dst.params.at(sp->name).value = sp->value;
    dst.params.at(sp->name).trainable = sp->trainable;
  }
  auto src_bufs = src.buffers();
  auto dst_bufs = dst.buffers();
  for (size_t i = 0; i < src_bufs.size(); ++i) *dst_bufs[i].second = *src_bufs[i].second;
  dst.training = src.training;
  return dst;
}

namespace detail {

template <typename S>
int block_forward(Backbone<S>& bb, Block<S>& blk, Tape<S>& t, int x, Rng* droppath_rng) {
  int h = ag::conv2d(t, x, t.param(*blk.dw.weight), t.param(*blk.dw.bias), blk.dw.spec);
  if (blk.bn) {
    h = ag::batch_norm(t, h, t.param(*blk.bn->gamma), t.param(*blk.bn->beta), blk.bn->running_mean,
                       blk.bn->running_var, blk.bn->momentum, blk.bn->eps, bb.training);
  }
  h = ag::layer_norm(t, h, t.param(*blk.norm.gamma), t.param(*blk.norm.beta), blk.norm.eps);
  h = ag::conv2d(t, h, t.param(*blk.pw1.weight), t.param(*blk.pw1.bias), blk.pw1.spec);
  h = ag::gelu(t, h);
  h = ag::conv2d(t, h, t.param(*blk.pw2.weight), t.param(*blk.pw2.bias), blk.pw2.spec);
  h = ag::scale_channels(t, h, t.param(*blk.layer_scale));
  if (blk.drop_path_rate > 0 && bb.training) {
    if (!droppath_rng) throw shape_error("drop_path active but no rng stream supplied to forward");
    const int n = t.shape(h)[0];
    Tensor<S> keep({n});
    const double rate = blk.drop_path_rate;
    for (int i = 0; i < n; ++i) keep.data[(size_t)i] = droppath_rng->bernoulli(rate) ? S(0) : (S)(1.0 / (1.0 - rate));
    h = ag::drop_path(t, h, keep);
  }
  return ag::add(t, x, h);
}

}  // namespace detail

// Runs the backbone on an image batch node [N, 3, H, W] and returns the last
// stage feature map node [N, dims[3], H/32, W/32].
template <typename S>
int forward_features(Backbone<S>& bb, Tape<S>& t, int x, Rng* droppath_rng = nullptr) {
  const auto& shape = t.shape(x);
  if (shape.size() != 4 || shape[1] != 3) throw shape_error("backbone input must be [N, 3, H, W]");
  const int red = bb.cfg.reduction();
  if (shape[2] % red != 0 || shape[3] % red != 0 || shape[2] < red || shape[3] < red) {
    throw shape_error("backbone input spatial dims must be positive multiples of " + std::to_string(red) + ", got " +
                      std::to_string(shape[2]) + "x" + std::to_string(shape[3]));
  }
  int h = ag::conv2d(t, x, t.param(*bb.stem_conv.weight), t.param(*bb.stem_conv.bias), bb.stem_conv.spec);
  h = ag::layer_norm(t, h, t.param(*bb.stem_norm.gamma), t.param(*bb.stem_norm.beta), bb.stem_norm.eps);
  for (int s = 0; s < 4; ++s) {
    if (s > 0) {
      auto& down = bb.downsamples[(size_t)s - 1];
      h = ag::layer_norm(t, h, t.param(*down.norm.gamma), t.param(*down.norm.beta), down.norm.eps);
      h = ag::conv2d(t, h, t.param(*down.conv.weight), t.param(*down.conv.bias), down.conv.spec);
    }
    for (auto& blk : bb.stages[(size_t)s]) h = detail::block_forward(bb, blk, t, h, droppath_rng);
  }
  return h;
}

// Pooled embedding: LN(GAP(features)), shape [N, dims[3]].
template <typename S>
int forward_pooled(Backbone<S>& bb, Tape<S>& t, int x, Rng* droppath_rng = nullptr) {
  int feats = forward_features(bb, t, x, droppath_rng);
  int pooled = ag::global_avg_pool(t, feats);
  return ag::layer_norm(t, pooled, t.param(*bb.final_norm.gamma), t.param(*bb.final_norm.beta), bb.final_norm.eps);
}

// Absorbs each block's BatchNorm into its depthwise conv:
//   W'[c] = W[c] * gamma_c/sqrt(var_c + eps)
//   b'[c] = (b[c] - mean_c) * gamma_c/sqrt(var_c + eps) + beta_c
// Returns a BN-free backbone that matches eval-mode forward passes of the
// source. Parameter names outside bn.* are unchanged.
template <typename S>
Backbone<S> fold_batchnorm(Backbone<S>& src) {
  if (!src.cfg.use_bn_after_dw) throw config_error("fold_batchnorm: backbone has no BatchNorm to fold");
  BackboneConfig folded_cfg = src.cfg;
  folded_cfg.use_bn_after_dw = false;
  Backbone<S> dst = build_backbone<S>(folded_cfg, 0);
  for (auto* sp : src.params.all()) {
    if (auto* dp = dst.params.find(sp->name)) dp->value = sp->value;
  }
  for (int s = 0; s < 4; ++s) {
    for (size_t b = 0; b < src.stages[(size_t)s].size(); ++b) {
      const Block<S>& sb = src.stages[(size_t)s][b];
      Block<S>& db = dst.stages[(size_t)s][b];
      const int c = src.cfg.dims[(size_t)s];
      const int k = src.cfg.kernel_size;
      for (int ci = 0; ci < c; ++ci) {
        const S scale = sb.bn->gamma->value.data[(size_t)ci] /
                        std::sqrt(sb.bn->running_var.data[(size_t)ci] + sb.bn->eps);
        for (int i = 0; i < k * k; ++i) db.dw.weight->value.data[(size_t)ci * k * k + i] *= scale;
        db.dw.bias->value.data[(size_t)ci] =
            (sb.dw.bias->value.data[(size_t)ci] - sb.bn->running_mean.data[(size_t)ci]) * scale +
            sb.bn->beta->value.data[(size_t)ci];
      }
    }
  }
  dst.training = false;
  return dst;
}

}  // namespace bcssl
