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
#include <cmath>

#include "bcssl/tensor.hpp"

// Pixel-level image operations. Images are Tensor<float> [3, H, W] with
// values nominally in [0, 1] until the final normalization step.

namespace bcssl {

struct Rgb {
  float r, g, b;
};
struct Hsv {
  float h, s, v;  // h in [0, 1) turns
};

inline Rgb hsv_to_rgb(Hsv c) {
  const float h = (c.h - std::floor(c.h)) * 6.0f;
  const int i = (int)h % 6;
  const float f = h - std::floor(h);
  const float p = c.v * (1.0f - c.s);
  const float q = c.v * (1.0f - c.s * f);
  const float t = c.v * (1.0f - c.s * (1.0f - f));
  switch (i) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
  }
}

inline Hsv rgb_to_hsv(Rgb c) {
  const float mx = std::max(c.r, std::max(c.g, c.b));
  const float mn = std::min(c.r, std::min(c.g, c.b));
  const float d = mx - mn;
  Hsv out{0.0f, mx > 0 ? d / mx : 0.0f, mx};
  if (d > 0) {
    if (mx == c.r) {
      out.h = (c.g - c.b) / d / 6.0f;
    } else if (mx == c.g) {
      out.h = ((c.b - c.r) / d + 2.0f) / 6.0f;
    } else {
      out.h = ((c.r - c.g) / d + 4.0f) / 6.0f;
    }
    out.h -= std::floor(out.h);
  }
  return out;
}

// ITU-R 601 luma, the usual RGB -> grayscale projection.
inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

namespace detail {

inline void check_image(const Tensor<float>& img, const char* what) {
  if (img.ndim() != 3 || img.shape[0] != 3) throw shape_error(std::string(what) + ": image must be [3, H, W]");
}

// Catmull-Rom cubic kernel (a = -0.5).
inline double cubic_weight(double t) {
  t = std::abs(t);
  if (t < 1.0) return (1.5 * t - 2.5) * t * t + 1.0;
  if (t < 2.0) return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0;
  return 0.0;
}

// One separable resampling pass along a length-`in_n` axis, edge-clamped.
// `read(j)` fetches source sample j; results go through `write(i, v)`.
template <typename ReadF, typename WriteF>
void cubic_pass(int in_n, int out_n, ReadF read, WriteF write) {
  const double scale = (double)in_n / out_n;
  for (int i = 0; i < out_n; ++i) {
    const double src = (i + 0.5) * scale - 0.5;
    const int base = (int)std::floor(src);
    const double f = src - base;
    double w[4], wsum = 0.0;
    for (int k = 0; k < 4; ++k) wsum += (w[k] = cubic_weight(f - (k - 1)));
    double acc = 0.0;
    for (int k = 0; k < 4; ++k) {
      const int j = std::clamp(base + k - 1, 0, in_n - 1);
      acc += w[k] * read(j);
    }
    write(i, acc / wsum);
  }
}

}  // namespace detail

// Catmull-Rom (a = -0.5) bicubic resize with pixel-center alignment and
// edge-clamped taps. Separable: rows first, then columns. Pure interpolation;
// values may over/undershoot the input range slightly.
inline Tensor<float> resize_bicubic(const Tensor<float>& img, int out_h, int out_w) {
  detail::check_image(img, "resize_bicubic");
  if (out_h < 1 || out_w < 1) throw shape_error("resize_bicubic: target size must be positive");
  const int h = img.shape[1], w = img.shape[2];
  if (out_h == h && out_w == w) return img;
  Tensor<float> out({3, out_h, out_w});
  std::vector<float> mid((size_t)h * out_w);
  for (int c = 0; c < 3; ++c) {
    const float* src = img.ptr() + (size_t)c * h * w;
    for (int y = 0; y < h; ++y) {
      detail::cubic_pass(
          w, out_w, [&](int j) { return (double)src[(size_t)y * w + j]; },
          [&](int i, double v) { mid[(size_t)y * out_w + i] = (float)v; });
    }
    float* dst = out.ptr() + (size_t)c * out_h * out_w;
    for (int x = 0; x < out_w; ++x) {
      detail::cubic_pass(
          h, out_h, [&](int j) { return (double)mid[(size_t)j * out_w + x]; },
          [&](int i, double v) { dst[(size_t)i * out_w + x] = (float)v; });
    }
  }
  return out;
}

// Extracts the [y0, y0+ch) x [x0, x0+cw) region.
inline Tensor<float> crop(const Tensor<float>& img, int y0, int x0, int ch, int cw) {
  detail::check_image(img, "crop");
  const int h = img.shape[1], w = img.shape[2];
  if (ch < 1 || cw < 1 || y0 < 0 || x0 < 0 || y0 + ch > h || x0 + cw > w) {
    throw shape_error("crop: region out of bounds");
  }
  Tensor<float> out({3, ch, cw});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < ch; ++y) {
      const float* src = img.ptr() + ((size_t)c * h + (size_t)(y0 + y)) * w + x0;
      std::copy(src, src + cw, out.ptr() + ((size_t)c * ch + y) * cw);
    }
  }
  return out;
}

inline Tensor<float> hflip(const Tensor<float>& img) {
  detail::check_image(img, "hflip");
  const int h = img.shape[1], w = img.shape[2];
  Tensor<float> out(img.shape);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      const float* src = img.ptr() + ((size_t)c * h + y) * w;
      float* dst = out.ptr() + ((size_t)c * h + y) * w;
      for (int x = 0; x < w; ++x) dst[x] = src[w - 1 - x];
    }
  }
  return out;
}

inline void clamp01_inplace(Tensor<float>& img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

// Scales intensities by `factor`, clamped back to [0, 1].
inline void adjust_brightness_inplace(Tensor<float>& img, float factor) {
  for (auto& v : img.data) v = std::clamp(v * factor, 0.0f, 1.0f);
}

// Blends with the image-wide mean luma: out = (x - m) * factor + m.
inline void adjust_contrast_inplace(Tensor<float>& img, float factor) {
  detail::check_image(img, "adjust_contrast");
  const int64_t plane = (int64_t)img.shape[1] * img.shape[2];
  double m = 0.0;
  for (int64_t i = 0; i < plane; ++i) {
    m += luma(img.data[(size_t)i], img.data[(size_t)(plane + i)], img.data[(size_t)(2 * plane + i)]);
  }
  const float mean = (float)(m / plane);
  for (auto& v : img.data) v = std::clamp((v - mean) * factor + mean, 0.0f, 1.0f);
}

// Blends with the per-pixel luma: factor 0 is grayscale, 1 is identity.
inline void adjust_saturation_inplace(Tensor<float>& img, float factor) {
  detail::check_image(img, "adjust_saturation");
  const int64_t plane = (int64_t)img.shape[1] * img.shape[2];
  for (int64_t i = 0; i < plane; ++i) {
    const float g = luma(img.data[(size_t)i], img.data[(size_t)(plane + i)], img.data[(size_t)(2 * plane + i)]);
    for (int c = 0; c < 3; ++c) {
      float& v = img.data[(size_t)(c * plane + i)];
      v = std::clamp((v - g) * factor + g, 0.0f, 1.0f);
    }
  }
}

// Rotates hue by `shift` turns (torchvision convention: shift in [-0.5, 0.5]).
inline void adjust_hue_inplace(Tensor<float>& img, float shift) {
  detail::check_image(img, "adjust_hue");
  const int64_t plane = (int64_t)img.shape[1] * img.shape[2];
  for (int64_t i = 0; i < plane; ++i) {
    Hsv hsv = rgb_to_hsv({img.data[(size_t)i], img.data[(size_t)(plane + i)], img.data[(size_t)(2 * plane + i)]});
    hsv.h += shift;
    const Rgb rgb = hsv_to_rgb(hsv);
    img.data[(size_t)i] = rgb.r;
    img.data[(size_t)(plane + i)] = rgb.g;
    img.data[(size_t)(2 * plane + i)] = rgb.b;
  }
}

inline void to_grayscale_inplace(Tensor<float>& img) {
  detail::check_image(img, "to_grayscale");
  const int64_t plane = (int64_t)img.shape[1] * img.shape[2];
  for (int64_t i = 0; i < plane; ++i) {
    const float g = luma(img.data[(size_t)i], img.data[(size_t)(plane + i)], img.data[(size_t)(2 * plane + i)]);
    img.data[(size_t)i] = img.data[(size_t)(plane + i)] = img.data[(size_t)(2 * plane + i)] = g;
  }
}

// Normalized 1-D Gaussian taps for radius ceil(3 sigma); weights sum to 1.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw config_error("gaussian_kernel: sigma must be positive");
  const int radius = std::max(1, (int)std::ceil(3.0 * sigma));
  std::vector<double> w((size_t)(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += (w[(size_t)(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : w) v /= sum;
  return w;
}

// Separable edge-clamped Gaussian blur.
inline void gaussian_blur_inplace(Tensor<float>& img, double sigma) {
  detail::check_image(img, "gaussian_blur");
  const auto kern = gaussian_kernel(sigma);
  const int radius = ((int)kern.size() - 1) / 2;
  const int h = img.shape[1], w = img.shape[2];
  std::vector<float> tmp((size_t)h * w);
  for (int c = 0; c < 3; ++c) {
    float* plane = img.ptr() + (size_t)c * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kern[(size_t)(k + radius)] * plane[(size_t)y * w + std::clamp(x + k, 0, w - 1)];
        tmp[(size_t)y * w + x] = (float)acc;
      }
    }
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kern[(size_t)(k + radius)] * tmp[(size_t)std::clamp(y + k, 0, h - 1) * w + x];
        plane[(size_t)y * w + x] = (float)acc;
      }
    }
  }
}

// Inverts every value strictly above the threshold: x > t  ->  1 - x.
inline void solarize_inplace(Tensor<float>& img, float threshold) {
  for (auto& v : img.data) {
    if (v > threshold) v = 1.0f - v;
  }
}

// Per-channel standardization: (x - mean[c]) / std[c].
inline void normalize_inplace(Tensor<float>& img, const std::array<double, 3>& mean, const std::array<double, 3>& stddev) {
  detail::check_image(img, "normalize");
  const int64_t plane = (int64_t)img.shape[1] * img.shape[2];
  for (int c = 0; c < 3; ++c) {
    const float m = (float)mean[(size_t)c], inv = (float)(1.0 / stddev[(size_t)c]);
    for (int64_t i = 0; i < plane; ++i) {
      float& v = img.data[(size_t)(c * plane + i)];
      v = (v - m) * inv;
    }
  }
}

}  // namespace bcssl
