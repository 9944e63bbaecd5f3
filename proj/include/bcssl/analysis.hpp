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

// Qualitative and quantitative model inspection: Grad-CAM and Eigen-CAM
// heatmaps over the last-stage feature map, effective-receptive-field (ERF)
// maps, and portable image output (binary PPM with a jet colormap, plus a
// small raw-grid dump format for downstream plotting).
//
// All analyses are read-only: the model is forced into eval mode for the
// duration of a call, parameters receive no gradients, and every flag touched
// is restored on exit.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bcssl/backbone.hpp"
#include "bcssl/eval.hpp"
#include "bcssl/image.hpp"

namespace bcssl {

// ---------------------------------------------------------------------------
// Heatmap
// ---------------------------------------------------------------------------

enum class HeatmapMethod : uint32_t { gradcam = 0, eigencam = 1, erf = 2 };

inline const char* heatmap_method_name(HeatmapMethod m) {
  switch (m) {
    case HeatmapMethod::gradcam: return "gradcam";
    case HeatmapMethod::eigencam: return "eigencam";
    default: return "erf";
  }
}

// A normalized 2-D saliency map. After construction by any analysis in this
// header, `values` lies in [0, 1] and its maximum is exactly 1 unless the raw
// map was identically zero (then the map is all zeros).
struct Heatmap {
  Tensor<float> values;  // [H, W]
  std::string source;    // layer the map was derived from, e.g. "stage3"
  HeatmapMethod method = HeatmapMethod::gradcam;

  int height() const { return values.shape.empty() ? 0 : values.shape[0]; }
  int width() const { return values.shape.size() < 2 ? 0 : values.shape[1]; }

  void validate() const {
    if (values.shape.size() != 2 || values.numel() < 1) {
      throw shape_error("heatmap values must be a non-empty [H, W] grid");
    }
    float mx = 0.0f;
    for (int64_t i = 0; i < values.numel(); ++i) {
      const float v = values.data[(size_t)i];
      if (!std::isfinite(v)) throw config_error("heatmap contains a non-finite value");
      if (v < 0.0f || v > 1.0f) {
        throw config_error(detail::strf("heatmap value %g outside [0, 1]", (double)v));
      }
      mx = std::max(mx, v);
    }
    if (mx != 0.0f && mx != 1.0f) {
      throw config_error(detail::strf("heatmap max is %g; must be 1 unless the map is all zeros", (double)mx));
    }
  }
};

namespace detail {

// Restores Parameter::trainable flags on scope exit. Analyses disable them so
// tapes never track model parameters: backward passes then compute input and
// activation gradients only, leaving Parameter::grad untouched.
template <typename S>
struct FrozenParamsGuard {
  std::vector<std::pair<Parameter<S>*, bool>> saved;
  explicit FrozenParamsGuard(Backbone<S>& bb) {
    for (auto* p : bb.params.all()) {
      saved.emplace_back(p, p->trainable);
      p->trainable = false;
    }
  }
  ~FrozenParamsGuard() {
    for (auto& [p, t] : saved) p->trainable = t;
  }
};

// Min-max normalization: min -> 0, max -> 1. A map with no positive mass
// collapses to zeros; a flat positive map maps to ones.
inline Tensor<float> normalize_min_max(const Tensor<float>& raw) {
  Tensor<float> out(raw.shape);
  float mn = raw.data[0], mx = raw.data[0];
  for (int64_t i = 0; i < raw.numel(); ++i) {
    mn = std::min(mn, raw.data[(size_t)i]);
    mx = std::max(mx, raw.data[(size_t)i]);
  }
  if (mx <= 0.0f) return out;  // zero-initialized
  if (mx == mn) {
    std::fill(out.data.begin(), out.data.end(), 1.0f);
    return out;
  }
  const float span = mx - mn;
  for (int64_t i = 0; i < raw.numel(); ++i) out.data[(size_t)i] = (raw.data[(size_t)i] - mn) / span;
  return out;
}

// Scale-only normalization: negatives are clamped to 0, then the map is
// divided by its maximum. Preserves ratios between non-negative entries.
inline Tensor<float> normalize_unit_max(const Tensor<float>& raw) {
  Tensor<float> out(raw.shape);
  float mx = 0.0f;
  for (int64_t i = 0; i < raw.numel(); ++i) mx = std::max(mx, raw.data[(size_t)i]);
  if (mx <= 0.0f) return out;  // zero-initialized
  for (int64_t i = 0; i < raw.numel(); ++i) out.data[(size_t)i] = std::max(raw.data[(size_t)i], 0.0f) / mx;
  return out;
}

// Bicubic upsample of a single-channel grid via the 3-channel image resizer.
inline Tensor<float> upsample_grid(const Tensor<float>& grid, int out_h, int out_w) {
  const int h = grid.shape[0], w = grid.shape[1];
  if (h == out_h && w == out_w) return grid;
  Tensor<float> img({3, h, w});
  for (int c = 0; c < 3; ++c) {
    std::copy(grid.data.begin(), grid.data.end(), img.data.begin() + (size_t)c * h * w);
  }
  const Tensor<float> big = resize_bicubic(img, out_h, out_w);
  Tensor<float> out({out_h, out_w});
  std::copy(big.data.begin(), big.data.begin() + (size_t)out_h * out_w, out.data.begin());
  return out;
}

template <typename S>
Tensor<float> to_float_grid(const Tensor<S>& m) {
  Tensor<float> out(m.shape);
  for (int64_t i = 0; i < m.numel(); ++i) out.data[(size_t)i] = (float)m.data[(size_t)i];
  return out;
}

template <typename S>
Tensor<S> batch_of_one(const Tensor<S>& image) {
  if (image.shape.size() != 3 || image.shape[0] != 3) {
    throw shape_error("analysis input image must be [3, H, W]");
  }
  Tensor<S> x({1, image.shape[0], image.shape[1], image.shape[2]});
  x.data = image.data;
  return x;
}

// Eval-mode, gradient-free pass to the last-stage feature map [C, h, w].
template <typename S>
Tensor<S> last_stage_activations(Backbone<S>& model, const Tensor<S>& image) {
  EvalModeGuard<S> eval_guard(model);
  Tape<S> t(false);
  const int x = t.constant(batch_of_one(image));
  const int feats = forward_features(model, t, x);
  const Tensor<S>& fv = t.val(feats);
  Tensor<S> a({fv.shape[1], fv.shape[2], fv.shape[3]});
  a.data = fv.data;
  return a;
}

}  // namespace detail

// Fraction of pixels whose value is >= threshold * max(map). An all-zero map
// has max 0, so every pixel qualifies and the fraction is 1.
inline double area_fraction(const Heatmap& hm, double threshold = 0.2) {
  hm.validate();
  float mx = 0.0f;
  for (int64_t i = 0; i < hm.values.numel(); ++i) mx = std::max(mx, hm.values.data[(size_t)i]);
  const double cut = threshold * (double)mx;
  int64_t hits = 0;
  for (int64_t i = 0; i < hm.values.numel(); ++i) {
    if ((double)hm.values.data[(size_t)i] >= cut) ++hits;
  }
  return (double)hits / (double)hm.values.numel();
}

// Bicubic upsample of a heatmap followed by re-normalization to unit max
// (interpolation overshoot is clamped). Intended for rendering low-resolution
// maps (Eigen-CAM, which lives at feature resolution) at image size.
inline Heatmap upsample_heatmap(const Heatmap& hm, int out_h, int out_w) {
  hm.validate();
  if (out_h < 1 || out_w < 1) throw shape_error("upsample_heatmap: target size must be positive");
  Heatmap out;
  out.source = hm.source;
  out.method = hm.method;
  out.values = detail::normalize_unit_max(detail::upsample_grid(hm.values, out_h, out_w));
  return out;
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

// Channel-weighted activation map. `a` holds activations [C, h, w] and `g`
// the gradient of a scalar score with respect to them (same shape). Each
// channel's weight is the spatial mean of its gradient; the raw map is
// ReLU(sum_c weight_c * a_c), computed in double precision. Unnormalized.
template <typename S>
Tensor<S> cam_from_gradients(const Tensor<S>& a, const Tensor<S>& g) {
  if (a.shape.size() != 3 || a.shape != g.shape) {
    throw shape_error("cam_from_gradients expects matching [C, h, w] activation and gradient tensors");
  }
  const int c = a.shape[0], h = a.shape[1], w = a.shape[2];
  const int64_t plane = (int64_t)h * w;
  Tensor<S> out({h, w});
  std::vector<double> weight((size_t)c, 0.0);
  for (int ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    const S* gp = g.ptr() + (size_t)ci * plane;
    for (int64_t p = 0; p < plane; ++p) acc += (double)gp[(size_t)p];
    weight[(size_t)ci] = acc / (double)plane;
  }
  for (int64_t p = 0; p < plane; ++p) {
    double acc = 0.0;
    for (int ci = 0; ci < c; ++ci) acc += weight[(size_t)ci] * (double)a.data[(size_t)ci * plane + (size_t)p];
    out.data[(size_t)p] = (S)std::max(acc, 0.0);
  }
  return out;
}

struct GradCamOptions {
  // Class whose logit is explained; -1 picks the classifier's argmax on this
  // image (ties resolve to the smallest class index).
  int target_class = -1;
  // Label-free fallback: explain the squared norm of the pooled embedding
  // instead of a classifier logit. The classifier argument is ignored. The
  // gradient of ||h||^2/2 at the current point equals h itself, so the score
  // is realized as <h, stop_gradient(h)>.
  bool feature_norm_target = false;
};

// Grad-CAM over the last-stage feature map, explained through the pooled
// embedding pipeline the linear probe sees: LN(GAP(A)), L2-normalized, then
// the probe's row for the target class. The map is bicubic-upsampled to the
// input resolution and min-max normalized; the additive bias term is omitted
// since it does not affect the gradient.
template <typename S>
Heatmap grad_cam(Backbone<S>& model, const ProbeResult& classifier, const Tensor<S>& image,
                 const GradCamOptions& opt = {}) {
  const int dim = model.cfg.dims[3];
  const int classes = opt.feature_norm_target ? 0 : (classifier.weight.shape.empty() ? 0 : classifier.weight.shape[0]);
  if (!opt.feature_norm_target) {
    if (classifier.weight.shape.size() != 2 || classifier.weight.shape[1] != dim || classes < 1) {
      throw config_error(detail::strf(
          "grad_cam requires a trained linear classifier with weight [classes, %d]; pass feature_norm_target "
          "for the label-free fallback",
          dim));
    }
    if (opt.target_class < -1 || opt.target_class >= classes) {
      throw config_error(detail::strf("grad_cam target class %d outside [0, %d)", opt.target_class, classes));
    }
  }

  detail::FrozenParamsGuard<S> freeze(model);
  const Tensor<S> a_value = detail::last_stage_activations(model, image);

  // Re-enter the activations as the only tracked leaf of a small head tape;
  // the gradient of the score w.r.t. them is then read off the leaf.
  Tape<S> t(true);
  Tensor<S> a_batch({1, a_value.shape[0], a_value.shape[1], a_value.shape[2]});
  a_batch.data = a_value.data;
  const int a = t.input(std::move(a_batch));
  const int pooled = ag::global_avg_pool(t, a);
  const int emb = ag::layer_norm(t, pooled, t.constant(model.final_norm.gamma->value),
                                 t.constant(model.final_norm.beta->value), model.final_norm.eps);

  int score;
  if (opt.feature_norm_target) {
    score = ag::inner(t, emb, t.val(emb));
  } else {
    const int feat = ag::l2_normalize(t, emb, (S)1e-12);
    const Tensor<S>& fv = t.val(feat);
    int target = opt.target_class;
    if (target < 0) {
      double best = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < classes; ++c) {
        double logit = (double)classifier.bias.data[(size_t)c];
        for (int d = 0; d < dim; ++d) {
          logit += (double)classifier.weight.data[(size_t)c * dim + d] * (double)fv.data[(size_t)d];
        }
        if (logit > best) {
          best = logit;
          target = c;
        }
      }
    }
    Tensor<S> row({1, dim});
    for (int d = 0; d < dim; ++d) row.data[(size_t)d] = (S)classifier.weight.data[(size_t)target * dim + d];
    score = ag::inner(t, feat, std::move(row));
  }
  t.backward(score);

  const Tensor<S>& ga = t.grad(a);
  Tensor<S> g({a_value.shape[0], a_value.shape[1], a_value.shape[2]});
  g.data = ga.data;
  const Tensor<S> raw = cam_from_gradients(a_value, g);

  Heatmap hm;
  hm.source = "stage3";
  hm.method = HeatmapMethod::gradcam;
  hm.values = detail::normalize_min_max(detail::upsample_grid(detail::to_float_grid(raw), image.shape[1], image.shape[2]));
  return hm;
}

// ---------------------------------------------------------------------------
// Eigen-CAM
// ---------------------------------------------------------------------------

// First right singular vector of the activations reshaped to [C, h*w],
// computed by power iteration on the (raw, uncentered) Gram matrix A^T A in
// double precision. SVD sign is arbitrary, so the sign making the map's sum
// non-negative is chosen; remaining negative components are clamped and the
// map is scaled to unit max (ratios between non-negative entries survive).
template <typename S>
Heatmap eigen_cam_of(const Tensor<S>& activations, const std::string& source = "activations") {
  if (activations.shape.size() != 3) throw shape_error("eigen_cam_of expects activations [C, h, w]");
  const int c = activations.shape[0], h = activations.shape[1], w = activations.shape[2];
  const int64_t n = (int64_t)h * w;

  Heatmap hm;
  hm.source = source;
  hm.method = HeatmapMethod::eigencam;
  hm.values = Tensor<float>({h, w});

  std::vector<double> gram((size_t)(n * n), 0.0);
  double total = 0.0;
  for (int ci = 0; ci < c; ++ci) {
    const S* row = activations.ptr() + (size_t)ci * n;
    for (int64_t p = 0; p < n; ++p) {
      for (int64_t q = 0; q <= p; ++q) gram[(size_t)(p * n + q)] += (double)row[(size_t)p] * (double)row[(size_t)q];
    }
  }
  for (int64_t p = 0; p < n; ++p) {
    for (int64_t q = p + 1; q < n; ++q) gram[(size_t)(p * n + q)] = gram[(size_t)(q * n + p)];
    for (int64_t q = 0; q < n; ++q) total += std::abs(gram[(size_t)(p * n + q)]);
  }
  if (total == 0.0) return hm;  // all-zero activations -> all-zero map

  std::vector<double> v((size_t)n), next((size_t)n);
  for (int64_t i = 0; i < n; ++i) v[(size_t)i] = 1.0 + 1e-3 * (double)i;
  double nv = 0.0;
  for (double x : v) nv += x * x;
  for (auto& x : v) x /= std::sqrt(nv);
  for (int iter = 0; iter < 1000; ++iter) {
    for (int64_t p = 0; p < n; ++p) {
      double acc = 0.0;
      for (int64_t q = 0; q < n; ++q) acc += gram[(size_t)(p * n + q)] * v[(size_t)q];
      next[(size_t)p] = acc;
    }
    double nn = 0.0;
    for (double x : next) nn += x * x;
    nn = std::sqrt(nn);
    if (nn == 0.0) {
      // Start vector fell in the null space; nudge it deterministically.
      for (int64_t i = 0; i < n; ++i) v[(size_t)i] += 1e-6 * (double)(i + 1);
      double r = 0.0;
      for (double x : v) r += x * x;
      for (auto& x : v) x /= std::sqrt(r);
      continue;
    }
    double delta = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      next[(size_t)i] /= nn;
      delta = std::max(delta, std::abs(next[(size_t)i] - v[(size_t)i]));
    }
    v.swap(next);
    if (delta < 1e-14) break;
  }

  double sum = 0.0;
  for (double x : v) sum += x;
  if (sum < 0.0) {
    for (auto& x : v) x = -x;
  }
  Tensor<float> raw({h, w});
  for (int64_t i = 0; i < n; ++i) raw.data[(size_t)i] = (float)v[(size_t)i];
  hm.values = detail::normalize_unit_max(raw);
  return hm;
}

// Eigen-CAM of the model's last-stage feature map for one image. The map
// lives at feature resolution (input size / reduction); use upsample_heatmap
// to render it at image size.
template <typename S>
Heatmap eigen_cam(Backbone<S>& model, const Tensor<S>& image) {
  const Tensor<S> a = detail::last_stage_activations(model, image);
  Heatmap hm = eigen_cam_of(a, "stage3");
  return hm;
}

// ---------------------------------------------------------------------------
// Effective receptive field
// ---------------------------------------------------------------------------

struct ErfOptions {
  int input_size = 96;  // odd feature maps (96/32 = 3) give an exact center
  int n_samples = 32;
  uint64_t seed = 0;
};

// Re-initializes every convolution weight with a variance-preserving
// truncated normal, sd = 1/sqrt(fan_in), keyed by (seed, parameter name);
// other parameters keep their values. Receptive-field studies at
// initialization need this: under the training init (sd 0.02, layer_scale
// near zero) every residual branch is practically silent, so gradients reach
// the input through the stem/downsample skeleton alone and the measured field
// is independent of the block kernel size. Combine with a config whose
// layer_scale_init is 1.
template <typename S>
void variance_preserving_init(Backbone<S>& bb, uint64_t seed) {
  for (auto* p : bb.params.all()) {
    const auto& sh = p->value.shape;
    if (sh.size() == 4) {
      const double fan_in = (double)sh[1] * sh[2] * sh[3];
      ParamSet<S>::init_trunc_normal(*p, seed, (S)(1.0 / std::sqrt(fan_in)));
    }
  }
}

// ERF of an arbitrary feature extractor. `forward` maps (tape, input node)
// to a feature-map node [1, C, h, w]. For each of n_samples standard-normal
// inputs [1, 3, S, S] (stream keyed by (seed, "erf", sample)), the gradient
// of the summed center-pixel feature vector w.r.t. the input is taken; |grad|
// is averaged over samples and input channels and scaled to unit max.
// `input_transform` edits each drawn input in place before the forward pass
// (identity by default); it lets callers probe input-ensemble symmetries,
// e.g. mirroring every sample.
template <typename S, typename Fwd, typename Xform>
Heatmap erf_map_of(Fwd&& forward, int input_size, int n_samples, uint64_t seed, const std::string& source,
                   Xform&& input_transform) {
  if (input_size < 1) throw config_error("erf input size must be positive");
  if (n_samples < 1) throw config_error("erf needs at least one sample");

  Tensor<double> acc({input_size, input_size});
  for (int s = 0; s < n_samples; ++s) {
    Rng rng(Rng::key_of({seed, fnv1a("erf"), (uint64_t)s}));
    Tensor<S> img({1, 3, input_size, input_size});
    for (auto& p : img.data) p = (S)rng.normal();
    input_transform(img);
    if (img.shape != std::vector<int>({1, 3, input_size, input_size})) {
      throw shape_error("erf input transform must preserve the input shape");
    }

    Tape<S> t(true);
    const int x = t.input(std::move(img));
    const int feat = forward(t, x);
    const auto& fs = t.shape(feat);
    if (fs.size() != 4 || fs[0] != 1) throw shape_error("erf forward must produce a [1, C, h, w] feature map");
    const int c = fs[1], h = fs[2], w = fs[3];
    Tensor<S> pick({1, c, h, w});
    for (int ci = 0; ci < c; ++ci) pick.data[(size_t)(((int64_t)ci * h + h / 2) * w + w / 2)] = (S)1;
    const int score = ag::inner(t, feat, std::move(pick));
    t.backward(score);

    const Tensor<S>& g = t.grad(x);
    const int64_t plane = (int64_t)input_size * input_size;
    for (int ch = 0; ch < 3; ++ch) {
      const S* gp = g.ptr() + (size_t)ch * plane;
      for (int64_t p = 0; p < plane; ++p) acc.data[(size_t)p] += std::abs((double)gp[(size_t)p]);
    }
  }

  const double scale = 1.0 / (3.0 * (double)n_samples);
  Tensor<float> raw({input_size, input_size});
  for (int64_t i = 0; i < raw.numel(); ++i) raw.data[(size_t)i] = (float)(acc.data[(size_t)i] * scale);

  Heatmap hm;
  hm.source = source;
  hm.method = HeatmapMethod::erf;
  hm.values = detail::normalize_unit_max(raw);
  return hm;
}

template <typename S, typename Fwd>
Heatmap erf_map_of(Fwd&& forward, int input_size, int n_samples, uint64_t seed,
                   const std::string& source = "custom") {
  return erf_map_of<S>(std::forward<Fwd>(forward), input_size, n_samples, seed, source, [](Tensor<S>&) {});
}

// ERF of the backbone's last-stage feature map, measured in eval mode with
// parameters frozen (works at initialization or on a trained model alike).
template <typename S>
Heatmap erf_map(Backbone<S>& model, const ErfOptions& opt = {}) {
  const int red = model.cfg.reduction();
  if (opt.input_size < red || opt.input_size % red != 0) {
    throw config_error(detail::strf("erf input size must be a positive multiple of %d, got %d", red, opt.input_size));
  }
  detail::EvalModeGuard<S> eval_guard(model);
  detail::FrozenParamsGuard<S> freeze(model);
  return erf_map_of<S>([&](Tape<S>& t, int x) { return forward_features(model, t, x); }, opt.input_size,
                       opt.n_samples, opt.seed, "stage3");
}

// ---------------------------------------------------------------------------
// Image output
// ---------------------------------------------------------------------------

namespace detail {

// Classic jet approximation on [0, 1]: each channel is a clamped tent.
inline void jet_rgb(double v, double rgb[3]) {
  rgb[0] = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  rgb[1] = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  rgb[2] = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
}

inline void write_ppm_impl(const Heatmap& hm, const Tensor<float>* underlay, const std::string& path) {
  hm.validate();
  const int h = hm.height(), w = hm.width();
  if (underlay) {
    if (underlay->shape.size() != 3 || underlay->shape[0] != 3 || underlay->shape[1] != h ||
        underlay->shape[2] != w) {
      throw shape_error(detail::strf("ppm underlay must be a [3, %d, %d] image matching the heatmap", h, w));
    }
  }
  BinaryWriter out(path);
  const std::string header = detail::strf("P6\n%d %d\n255\n", w, h);
  out.write_bytes(header.data(), header.size());
  const int64_t plane = (int64_t)h * w;
  std::vector<uint8_t> row((size_t)w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double rgb[3];
      jet_rgb((double)hm.values.data[(size_t)((int64_t)y * w + x)], rgb);
      if (underlay) {
        for (int c = 0; c < 3; ++c) {
          const double u = std::clamp((double)underlay->data[(size_t)(c * plane + (int64_t)y * w + x)], 0.0, 1.0);
          rgb[c] = 0.5 * rgb[c] + 0.5 * u;
        }
      }
      for (int c = 0; c < 3; ++c) row[(size_t)(x * 3 + c)] = (uint8_t)std::lround(255.0 * rgb[c]);
    }
    out.write_bytes(row.data(), row.size());
  }
  out.close();
}

}  // namespace detail

// Binary PPM (P6, maxval 255) render with a jet colormap. Layout: the ASCII
// header "P6\n{width} {height}\n255\n" followed by height*width RGB byte
// triplets in row-major order.
inline void write_heatmap_ppm(const Heatmap& hm, const std::string& path) {
  detail::write_ppm_impl(hm, nullptr, path);
}

// Same, alpha-blended 50/50 over an underlay image [3, H, W] with values in
// [0, 1] (e.g. Dataset::image output); the underlay must match the heatmap's
// dimensions.
inline void write_heatmap_ppm(const Heatmap& hm, const Tensor<float>& underlay, const std::string& path) {
  detail::write_ppm_impl(hm, &underlay, path);
}

// ---------------------------------------------------------------------------
// Raw heatmap dump
// ---------------------------------------------------------------------------

inline constexpr char kHeatmapMagic[4] = {'B', 'C', 'H', 'M'};
inline constexpr uint32_t kHeatmapVersion = 1;

// Raw-grid dump for downstream plotting, little-endian:
//   magic "BCHM" | version u32 = 1 | H u32 | W u32 | method u32 |
//   source_len u16 | source bytes | values f32 x H*W
inline void save_heatmap(const std::string& path, const Heatmap& hm) {
  hm.validate();
  if (hm.source.size() > 0xFFFF) throw config_error("heatmap source tag too long to serialize");
  BinaryWriter w(path);
  w.write_magic(kHeatmapMagic);
  w.write_u32(kHeatmapVersion);
  w.write_u32((uint32_t)hm.height());
  w.write_u32((uint32_t)hm.width());
  w.write_u32((uint32_t)hm.method);
  w.write_u16((uint16_t)hm.source.size());
  w.write_bytes(hm.source.data(), hm.source.size());
  for (int64_t i = 0; i < hm.values.numel(); ++i) w.write_f32(hm.values.data[(size_t)i]);
  w.close();
}

inline Heatmap load_heatmap(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kHeatmapMagic);
  uint64_t at = r.offset();
  const uint32_t version = r.read_u32("version");
  if (version != kHeatmapVersion) {
    throw parse_error(detail::strf("unsupported heatmap version %u (expected %u)", version, kHeatmapVersion), at);
  }
  at = r.offset();
  const uint32_t h = r.read_u32("height");
  const uint32_t w = r.read_u32("width");
  if (h < 1 || w < 1) throw parse_error("heatmap header declares an empty grid", at);
  at = r.offset();
  const uint32_t method = r.read_u32("method");
  if (method > 2) throw parse_error(detail::strf("unknown heatmap method tag %u", method), at);
  const uint16_t slen = r.read_u16("source length");
  Heatmap hm;
  hm.method = (HeatmapMethod)method;
  hm.source.resize(slen);
  if (slen > 0) r.read_bytes(hm.source.data(), slen, "source tag");
  at = r.offset();
  const uint64_t need = (uint64_t)h * w * 4;
  if (r.remaining() != need) {
    throw parse_error(detail::strf("heatmap grid: header implies %llu bytes, file holds %llu",
                                   (unsigned long long)need, (unsigned long long)r.remaining()),
                      at);
  }
  hm.values = Tensor<float>({(int)h, (int)w});
  for (int64_t i = 0; i < hm.values.numel(); ++i) hm.values.data[(size_t)i] = r.read_f32("heatmap value");
  r.expect_eof();
  try {
    hm.validate();
  } catch (const std::exception& e) {
    throw parse_error(std::string("heatmap failed validation: ") + e.what(), at);
  }
  return hm;
}

}  // namespace bcssl
