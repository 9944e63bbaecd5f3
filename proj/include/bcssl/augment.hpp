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

#include <numeric>

#include "bcssl/common.hpp"
#include "bcssl/image.hpp"
#include "bcssl/rng.hpp"

// Multi-crop view pipeline for self-distillation: random resized crops at two
// resolutions plus the standard photometric augmentations (flip, color
// jitter, grayscale, Gaussian blur, solarization), ending in per-channel
// normalization. Every view draws from its own counter-based stream keyed by
// (seed, epoch, sample index, view index), so results are independent of
// thread count and evaluation order.

namespace bcssl {

struct AugmentPolicy {
  int global_size = 64;
  int local_size = 32;
  int local_count = 6;
  double global_scale_lo = 0.4, global_scale_hi = 1.0;
  double local_scale_lo = 0.05, local_scale_hi = 0.4;
  double aspect_lo = 3.0 / 4.0, aspect_hi = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double jitter_brightness = 0.4, jitter_contrast = 0.4, jitter_saturation = 0.4, jitter_hue = 0.1;
  double grayscale_p = 0.2;
  // Asymmetric blur/solarize gates, per the BYOL/DINO convention: the first
  // global view is always blurred, the second rarely blurred but sometimes
  // solarized, locals are blurred half the time.
  double blur_p_global1 = 1.0, blur_p_global2 = 0.1, blur_p_local = 0.5;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
  double solarize_p = 0.2;
  double solarize_threshold = 0.5;
  std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
  std::array<double, 3> norm_std{0.229, 0.224, 0.225};

  void validate() const {
    auto prob = [](double p, const char* what) {
      if (p < 0.0 || p > 1.0) throw config_error(std::string(what) + " must be a probability in [0, 1]");
    };
    prob(flip_p, "flip_p");
    prob(jitter_p, "jitter_p");
    prob(grayscale_p, "grayscale_p");
    prob(blur_p_global1, "blur_p_global1");
    prob(blur_p_global2, "blur_p_global2");
    prob(blur_p_local, "blur_p_local");
    prob(solarize_p, "solarize_p");
    auto scale = [](double lo, double hi, const char* what) {
      if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) {
        throw config_error(std::string(what) + " scale range must satisfy 0 < lo <= hi <= 1");
      }
    };
    scale(global_scale_lo, global_scale_hi, "global");
    scale(local_scale_lo, local_scale_hi, "local");
    if (!(aspect_lo > 0 && aspect_lo <= aspect_hi)) throw config_error("aspect range must satisfy 0 < lo <= hi");
    if (global_size < 1 || local_size < 1 || local_size >= global_size) {
      throw config_error("crop sizes must satisfy 0 < local_size < global_size");
    }
    if (local_count < 0) throw config_error("local_count must be >= 0");
    if (jitter_brightness < 0 || jitter_contrast < 0 || jitter_saturation < 0 || jitter_hue < 0 || jitter_hue > 0.5) {
      throw config_error("jitter strengths must be >= 0 (hue <= 0.5)");
    }
    if (!(blur_sigma_lo > 0 && blur_sigma_lo <= blur_sigma_hi)) {
      throw config_error("blur sigma range must satisfy 0 < lo <= hi");
    }
    for (double s : norm_std) {
      if (!(s > 0)) throw config_error("normalization std must be positive");
    }
  }
};

// Identifies the view slot within a crop set; the photometric gates differ
// between the two global views.
enum class ViewKind { global1, global2, local };

// Deterministic augmentation coordinates for one sample draw.
struct RngStamp {
  uint64_t seed = 0;
  int64_t epoch = 0;
  int64_t index = 0;  // sample index within the dataset
};

inline Rng view_rng(const RngStamp& stamp, int view) {
  static const uint64_t tag = fnv1a("augment-view");
  return Rng(Rng::key_of({stamp.seed, tag, (uint64_t)stamp.epoch, (uint64_t)stamp.index, (uint64_t)view}));
}

struct CropRegion {
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

// Random resized crop sampler (the standard Inception-style algorithm): up to
// ten attempts draw an area fraction and log-uniform aspect ratio; the first
// geometry that fits is placed uniformly at random. After integer rounding
// the area is nudged back up if it fell below the lower scale bound, so the
// realized area fraction always lies within [scale_lo, 1]. If every attempt
// fails (only possible for extreme aspect policies), falls back to the
// largest centered crop with an in-range aspect ratio.
inline CropRegion sample_resized_crop(int height, int width, double scale_lo, double scale_hi, double aspect_lo,
                                      double aspect_hi, Rng& rng) {
  const double area = (double)height * width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_lo, scale_hi);
    const double aspect = std::exp(rng.uniform(std::log(aspect_lo), std::log(aspect_hi)));
    int w = (int)std::llround(std::sqrt(target * aspect));
    int h = (int)std::llround(std::sqrt(target / aspect));
    if (w < 1 || h < 1 || w > width || h > height) continue;
    while ((double)w * h < scale_lo * area) {
      if (h <= w && h < height) {
        ++h;
      } else if (w < width) {
        ++w;
      } else if (h < height) {
        ++h;
      } else {
        break;
      }
    }
    CropRegion r{rng.uniform_int(height - h + 1), rng.uniform_int(width - w + 1), h, w};
    return r;
  }
  const double in_ratio = (double)width / height;
  int w = width, h = height;
  if (in_ratio < aspect_lo) {
    h = std::min(height, (int)std::llround(width / aspect_lo));
  } else if (in_ratio > aspect_hi) {
    w = std::min(width, (int)std::llround(height * aspect_hi));
  }
  return CropRegion{(height - h) / 2, (width - w) / 2, h, w};
}

// One augmented view: crop -> resize -> flip -> jitter -> grayscale -> blur
// -> solarize -> normalize, with per-step gates drawn in that fixed order
// from `rng`.
inline Tensor<float> augment_view_with(const Tensor<float>& img, ViewKind kind, const AugmentPolicy& pol, Rng& rng) {
  detail::check_image(img, "augment_view");
  const bool global = kind != ViewKind::local;
  const int out_size = global ? pol.global_size : pol.local_size;
  const double lo = global ? pol.global_scale_lo : pol.local_scale_lo;
  const double hi = global ? pol.global_scale_hi : pol.local_scale_hi;

  const CropRegion r =
      sample_resized_crop(img.shape[1], img.shape[2], lo, hi, pol.aspect_lo, pol.aspect_hi, rng);
  Tensor<float> view = resize_bicubic(crop(img, r.y0, r.x0, r.h, r.w), out_size, out_size);
  clamp01_inplace(view);  // bicubic may overshoot [0, 1]

  if (rng.bernoulli(pol.flip_p)) view = hflip(view);

  if (rng.bernoulli(pol.jitter_p)) {
    std::vector<int> order{0, 1, 2, 3};
    rng.shuffle(order);
    for (int op : order) {
      switch (op) {
        case 0:
          adjust_brightness_inplace(view, (float)rng.uniform(std::max(0.0, 1.0 - pol.jitter_brightness),
                                                             1.0 + pol.jitter_brightness));
          break;
        case 1:
          adjust_contrast_inplace(view, (float)rng.uniform(std::max(0.0, 1.0 - pol.jitter_contrast),
                                                           1.0 + pol.jitter_contrast));
          break;
        case 2:
          adjust_saturation_inplace(view, (float)rng.uniform(std::max(0.0, 1.0 - pol.jitter_saturation),
                                                             1.0 + pol.jitter_saturation));
          break;
        default:
          adjust_hue_inplace(view, (float)rng.uniform(-pol.jitter_hue, pol.jitter_hue));
          break;
      }
    }
  }

  if (rng.bernoulli(pol.grayscale_p)) to_grayscale_inplace(view);

  const double blur_p = kind == ViewKind::global1   ? pol.blur_p_global1
                        : kind == ViewKind::global2 ? pol.blur_p_global2
                                                    : pol.blur_p_local;
  if (rng.bernoulli(blur_p)) gaussian_blur_inplace(view, rng.uniform(pol.blur_sigma_lo, pol.blur_sigma_hi));

  if (kind == ViewKind::global2 && rng.bernoulli(pol.solarize_p)) {
    solarize_inplace(view, (float)pol.solarize_threshold);
  }

  normalize_inplace(view, pol.norm_mean, pol.norm_std);
  return view;
}

inline Tensor<float> augment_view(const Tensor<float>& img, ViewKind kind, const AugmentPolicy& pol,
                                  const RngStamp& stamp, int view) {
  Rng rng = view_rng(stamp, view);
  return augment_view_with(img, kind, pol, rng);
}

// The augmented views of one sample: two globals (teacher and student) and
// local_count locals (student only).
struct CropSet {
  std::vector<Tensor<float>> global_views;
  std::vector<Tensor<float>> local_views;
  int source_index = -1;
  RngStamp stamp;
};

// Pure function of (image bytes, policy, stamp): safe to evaluate in parallel
// across samples. View streams are indexed 0..1 for globals, 2.. for locals.
inline CropSet multi_crop(const Tensor<float>& img, const AugmentPolicy& pol, const RngStamp& stamp) {
  pol.validate();
  CropSet set;
  set.source_index = (int)stamp.index;
  set.stamp = stamp;
  set.global_views.push_back(augment_view(img, ViewKind::global1, pol, stamp, 0));
  set.global_views.push_back(augment_view(img, ViewKind::global2, pol, stamp, 1));
  for (int l = 0; l < pol.local_count; ++l) {
    set.local_views.push_back(augment_view(img, ViewKind::local, pol, stamp, 2 + l));
  }
  return set;
}

// Deterministic evaluation view: center-crop to square, bicubic resize to
// `size`, normalize. No randomness.
inline Tensor<float> center_view(const Tensor<float>& img, int size, const AugmentPolicy& pol) {
  detail::check_image(img, "center_view");
  const int h = img.shape[1], w = img.shape[2];
  const int side = std::min(h, w);
  Tensor<float> view = resize_bicubic(crop(img, (h - side) / 2, (w - side) / 2, side, side), size, size);
  clamp01_inplace(view);
  normalize_inplace(view, pol.norm_mean, pol.norm_std);
  return view;
}

}  // namespace bcssl
