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

#include "bcssl/common.hpp"
#include "bcssl/image.hpp"
#include "bcssl/rng.hpp"

namespace bcssl {

// In-memory image dataset: N same-sized 8-bit RGB images (CHW layout) with
// integer labels. Immutable once loaded or generated.
//
// On-disk format (little-endian), extension-agnostic:
//   magic "BCDS" | version u32 = 1 | N u32 | H u32 | W u32 | C u32 = 3 |
//   num_classes u32 | N x (label u8 | H*W*C interleaved RGB bytes)
struct Dataset {
  int n = 0, height = 0, width = 0, num_classes = 0;
  std::vector<uint8_t> pixels;  // n * 3 * height * width, CHW per image
  std::vector<int> labels;      // n entries in [0, num_classes)
  std::string split = "train";

  int64_t image_numel() const { return 3ll * height * width; }

  const uint8_t* image_ptr(int i) const { return pixels.data() + (size_t)i * (size_t)image_numel(); }

  // Image i as float [3, H, W] scaled to [0, 1].
  Tensor<float> image(int i) const {
    if (i < 0 || i >= n) throw shape_error("dataset image index out of range");
    Tensor<float> out({3, height, width});
    const uint8_t* src = image_ptr(i);
    for (int64_t j = 0; j < image_numel(); ++j) out.data[(size_t)j] = (float)src[j] * (1.0f / 255.0f);
    return out;
  }

  void validate() const {
    if (n < 1) throw config_error("dataset must contain at least one image");
    if (height < 1 || width < 1) throw config_error("dataset image size must be positive");
    if (num_classes < 1) throw config_error("dataset must declare at least one class");
    if ((int64_t)pixels.size() != (int64_t)n * image_numel() || (int)labels.size() != n) {
      throw config_error("dataset storage does not match its declared shape");
    }
    for (int l : labels) {
      if (l < 0 || l >= num_classes) throw config_error("dataset label out of range");
    }
  }
};

inline constexpr char kDatasetMagic[4] = {'B', 'C', 'D', 'S'};
inline constexpr uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  BinaryWriter w(path);
  w.write_magic(kDatasetMagic);
  w.write_u32(kDatasetVersion);
  w.write_u32((uint32_t)ds.n);
  w.write_u32((uint32_t)ds.height);
  w.write_u32((uint32_t)ds.width);
  w.write_u32(3);
  w.write_u32((uint32_t)ds.num_classes);
  const int64_t plane = (int64_t)ds.height * ds.width;
  std::vector<uint8_t> hwc((size_t)(plane * 3));
  for (int i = 0; i < ds.n; ++i) {
    w.write_u8((uint8_t)ds.labels[(size_t)i]);
    const uint8_t* chw = ds.image_ptr(i);
    for (int64_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) hwc[(size_t)(p * 3 + c)] = chw[c * plane + p];
    }
    w.write_bytes(hwc.data(), hwc.size());
  }
  w.close();
}

inline Dataset load_dataset(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kDatasetMagic);
  uint64_t at = r.offset();
  const uint32_t version = r.read_u32("version");
  if (version != kDatasetVersion) {
    throw parse_error(detail::strf("unsupported dataset version %u (expected %u)", version, kDatasetVersion), at);
  }
  Dataset ds;
  at = r.offset();
  ds.n = (int)r.read_u32("image count");
  ds.height = (int)r.read_u32("image height");
  ds.width = (int)r.read_u32("image width");
  const uint32_t channels = r.read_u32("channel count");
  ds.num_classes = (int)r.read_u32("class count");
  if (ds.n < 1 || ds.height < 1 || ds.width < 1 || ds.num_classes < 1) {
    throw parse_error("dataset header declares an empty dimension", at);
  }
  if (channels != 3) throw parse_error(detail::strf("dataset must have 3 channels, got %u", channels), at);
  const int64_t plane = (int64_t)ds.height * ds.width;
  const uint64_t need = (uint64_t)ds.n * (uint64_t)(plane * 3 + 1);
  if (r.remaining() != need) {
    throw parse_error(detail::strf("image records: header implies %llu bytes, file holds %llu",
                                   (unsigned long long)need, (unsigned long long)r.remaining()),
                      r.offset());
  }
  ds.pixels.resize((size_t)(plane * 3) * (size_t)ds.n);
  ds.labels.resize((size_t)ds.n);
  std::vector<uint8_t> hwc((size_t)(plane * 3));
  for (int i = 0; i < ds.n; ++i) {
    at = r.offset();
    const uint8_t label = r.read_u8("label");
    if (label >= (uint32_t)ds.num_classes) {
      throw parse_error(detail::strf("image %d label %u out of range [0, %d)", i, label, ds.num_classes), at);
    }
    ds.labels[(size_t)i] = label;
    r.read_bytes(hwc.data(), hwc.size(), "pixel data");
    uint8_t* chw = ds.pixels.data() + (size_t)i * (size_t)(plane * 3);
    for (int64_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) chw[c * plane + p] = hwc[(size_t)(p * 3 + c)];
    }
  }
  r.expect_eof();
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generator
// ---------------------------------------------------------------------------

struct SynthSpec {
  int classes = 3;
  int samples_per_class = 100;
  int image_size = 64;
  uint64_t seed = 0;
};

namespace detail {

// Signed distance fields for the class shapes, in pixel units. Negative
// inside. Formulas are the standard 2-D SDF constructions.
inline float sd_disk(float x, float y, float r) { return std::sqrt(x * x + y * y) - r; }

inline float sd_ring(float x, float y, float r) {
  return std::abs(std::sqrt(x * x + y * y) - 0.72f * r) - 0.28f * r;
}

inline float sd_square(float x, float y, float r) {
  const float a = 0.75f * r;
  return std::max(std::abs(x), std::abs(y)) - a;
}

inline float sd_diamond(float x, float y, float r) {
  return (std::abs(x) + std::abs(y) - 1.05f * r) * 0.70710678f;
}

inline float sd_triangle(float x, float y, float r) {
  // Equilateral triangle, circumradius 0.95 r.
  const float k = 1.7320508f;  // sqrt(3)
  const float rr = 0.95f * r;
  x = std::abs(x) - rr;
  y = y + rr / k;
  if (x + k * y > 0.0f) {
    const float nx = (x - k * y) * 0.5f;
    y = (-k * x - y) * 0.5f;
    x = nx;
  }
  x -= std::clamp(x, -2.0f * rr, 0.0f);
  return -std::sqrt(x * x + y * y) * (y > 0 ? 1.0f : -1.0f);
}

inline float sd_box(float x, float y, float hw, float hh) {
  const float qx = std::abs(x) - hw, qy = std::abs(y) - hh;
  const float ox = std::max(qx, 0.0f), oy = std::max(qy, 0.0f);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0f);
}

inline float sd_cross(float x, float y, float r) {
  return std::min(sd_box(x, y, r, 0.3f * r), sd_box(x, y, 0.3f * r, r));
}

inline float shape_sdf(int cls, float x, float y, float r) {
  switch (cls) {
    case 0: return sd_disk(x, y, r);
    case 1: return sd_triangle(x, y, r);
    case 2: return sd_cross(x, y, r);
    case 3: return sd_square(x, y, r);
    case 4: return sd_ring(x, y, r);
    default: return sd_diamond(x, y, r);
  }
}

}  // namespace detail

inline constexpr int kMaxSynthClasses = 6;

// Renders class-dependent geometric shapes (disk, triangle, cross, square,
// ring, diamond) over textured gradient backgrounds. Shape geometry is the
// only class signal; color, pose, and scale are per-sample nuisances, so class
// identity survives crops, flips, color jitter, grayscale, blur, and
// solarization. Deterministic per seed: every sample draws from its own
// counter-based stream keyed by (seed, class, index).
inline Dataset generate_synthetic(const SynthSpec& spec) {
  if (spec.image_size < 32 || spec.image_size % 32 != 0) {
    throw config_error("synthetic image_size must be a positive multiple of 32, got " +
                       std::to_string(spec.image_size));
  }
  if (spec.classes < 1 || spec.classes > kMaxSynthClasses) {
    throw config_error("synthetic classes must be in [1, " + std::to_string(kMaxSynthClasses) + "], got " +
                       std::to_string(spec.classes));
  }
  if (spec.samples_per_class < 1) throw config_error("samples_per_class must be >= 1");

  Dataset ds;
  ds.n = spec.classes * spec.samples_per_class;
  ds.height = ds.width = spec.image_size;
  ds.num_classes = spec.classes;
  ds.pixels.resize((size_t)ds.n * (size_t)ds.image_numel());
  ds.labels.resize((size_t)ds.n);

  const int sz = spec.image_size;
  const int64_t plane = (int64_t)sz * sz;
  const uint64_t tag = fnv1a("synthetic");
  for (int cls = 0; cls < spec.classes; ++cls) {
    for (int idx = 0; idx < spec.samples_per_class; ++idx) {
      const int i = cls * spec.samples_per_class + idx;
      ds.labels[(size_t)i] = cls;
      Rng rng(Rng::key_of({spec.seed, tag, (uint64_t)cls, (uint64_t)idx}));

      // Muted two-tone gradient background with per-pixel noise.
      const Rgb bg_a = hsv_to_rgb({(float)rng.next_double(), (float)rng.uniform(0.05, 0.30),
                                   (float)rng.uniform(0.22, 0.45)});
      const Rgb bg_b = hsv_to_rgb({(float)rng.next_double(), (float)rng.uniform(0.05, 0.30),
                                   (float)rng.uniform(0.22, 0.45)});
      const double grad_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const float gx = (float)std::cos(grad_angle), gy = (float)std::sin(grad_angle);
      const float noise_amp = (float)rng.uniform(0.015, 0.04);

      // Bright shape color; hue is independent of the class.
      const Rgb fg = hsv_to_rgb({(float)rng.next_double(), (float)rng.uniform(0.45, 0.85),
                                 (float)rng.uniform(0.85, 1.0)});

      // Pose and scale nuisances. Rotation stays within +-15 degrees so the
      // square and diamond classes remain 45 degrees apart.
      const float cx = (float)(sz * (0.5 + rng.uniform(-0.15, 0.15)));
      const float cy = (float)(sz * (0.5 + rng.uniform(-0.15, 0.15)));
      const float radius = (float)(sz * rng.uniform(0.18, 0.30));
      const double rot = rng.uniform(-std::numbers::pi / 12.0, std::numbers::pi / 12.0);
      const float cr = (float)std::cos(rot), sr = (float)std::sin(rot);

      uint8_t* out = ds.pixels.data() + (size_t)i * (size_t)ds.image_numel();
      for (int y = 0; y < sz; ++y) {
        for (int x = 0; x < sz; ++x) {
          // Background gradient position in [0, 1] along the gradient axis.
          const float u = 0.5f + 0.5f * ((x - sz * 0.5f) * gx + (y - sz * 0.5f) * gy) / (sz * 0.70710678f);
          float r = bg_a.r + (bg_b.r - bg_a.r) * u;
          float g = bg_a.g + (bg_b.g - bg_a.g) * u;
          float b = bg_a.b + (bg_b.b - bg_a.b) * u;
          r += (float)rng.uniform(-noise_amp, noise_amp);
          g += (float)rng.uniform(-noise_amp, noise_amp);
          b += (float)rng.uniform(-noise_amp, noise_amp);

          // Rotated shape-local coordinates; smoothstep edge over ~1.2 px.
          const float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
          const float lx = cr * dx + sr * dy, ly = -sr * dx + cr * dy;
          const float sd = detail::shape_sdf(cls, lx, ly, radius);
          const float t = std::clamp(0.5f - sd * 0.8333333f, 0.0f, 1.0f);
          const float alpha = t * t * (3.0f - 2.0f * t);
          r += (fg.r - r) * alpha;
          g += (fg.g - g) * alpha;
          b += (fg.b - b) * alpha;

          const int64_t p = (int64_t)y * sz + x;
          out[p] = (uint8_t)std::lround(std::clamp(r, 0.0f, 1.0f) * 255.0f);
          out[plane + p] = (uint8_t)std::lround(std::clamp(g, 0.0f, 1.0f) * 255.0f);
          out[2 * plane + p] = (uint8_t)std::lround(std::clamp(b, 0.0f, 1.0f) * 255.0f);
        }
      }
    }
  }
  ds.validate();
  return ds;
}

}  // namespace bcssl
