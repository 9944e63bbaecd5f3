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
#include <numbers>

#include "bcssl/parallel.hpp"
#include "bcssl/tensor.hpp"

namespace bcssl::ops {

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

inline int conv_out_size(int in, int k, int stride, int pad) {
  int out = (in + 2 * pad - k) / stride + 1;
  if (out <= 0) {
    throw shape_error("conv output size would be " + std::to_string(out) + " (input " + std::to_string(in) +
                      ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(pad) + ")");
  }
  return out;
}

// ---------------------------------------------------------------------------
// GEMM: C[M,N] += A[M,K] * B[K,N], all row-major.
//
// Every output element is produced by a single fused-multiply-add chain that
// walks k in ascending order, in both the register-tiled fast path and the
// scalar tail path. This makes the reduction order a fixed, documented part
// of the contract: results are bitwise reproducible and identical to a naive
// triple loop that accumulates with std::fma in the same k order.
// ---------------------------------------------------------------------------

template <typename S>
void gemm_accum(const S* A, const S* B, S* C, int M, int K, int N) {
  constexpr int MR = 4;
  constexpr int NR = (int)(64 / sizeof(S));  // 16 floats or 8 doubles per row of the tile
  for (int m0 = 0; m0 < M; m0 += MR) {
    const int mb = std::min(MR, M - m0);
    for (int n0 = 0; n0 < N; n0 += NR) {
      const int nb = std::min(NR, N - n0);
      if (mb == MR && nb == NR) {
        S acc[MR][NR];
        for (int i = 0; i < MR; ++i)
          for (int j = 0; j < NR; ++j) acc[i][j] = C[(size_t)(m0 + i) * N + n0 + j];
        const S* a0 = A + (size_t)(m0 + 0) * K;
        const S* a1 = A + (size_t)(m0 + 1) * K;
        const S* a2 = A + (size_t)(m0 + 2) * K;
        const S* a3 = A + (size_t)(m0 + 3) * K;
        for (int k = 0; k < K; ++k) {
          const S* brow = B + (size_t)k * N + n0;
          const S v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
          for (int j = 0; j < NR; ++j) acc[0][j] = std::fma(v0, brow[j], acc[0][j]);
          for (int j = 0; j < NR; ++j) acc[1][j] = std::fma(v1, brow[j], acc[1][j]);
          for (int j = 0; j < NR; ++j) acc[2][j] = std::fma(v2, brow[j], acc[2][j]);
          for (int j = 0; j < NR; ++j) acc[3][j] = std::fma(v3, brow[j], acc[3][j]);
        }
        for (int i = 0; i < MR; ++i)
          for (int j = 0; j < NR; ++j) C[(size_t)(m0 + i) * N + n0 + j] = acc[i][j];
      } else {
        for (int i = 0; i < mb; ++i) {
          const S* arow = A + (size_t)(m0 + i) * K;
          for (int j = 0; j < nb; ++j) {
            S acc = C[(size_t)(m0 + i) * N + n0 + j];
            for (int k = 0; k < K; ++k) acc = std::fma(arow[k], B[(size_t)k * N + n0 + j], acc);
            C[(size_t)(m0 + i) * N + n0 + j] = acc;
          }
        }
      }
    }
  }
}

namespace detail {

template <typename S>
std::vector<S>& scratch(int which) {
  thread_local std::vector<S> bufs[4];
  return bufs[which];
}

// Copies one H x W plane into a zero-padded (H+2p) x (W+2p) buffer.
template <typename S>
void pad_plane(const S* src, int h, int w, int pad, S* dst) {
  const int ph = h + 2 * pad, pw = w + 2 * pad;
  if (pad == 0) {
    std::memcpy(dst, src, sizeof(S) * (size_t)h * w);
    return;
  }
  std::fill(dst, dst + (size_t)ph * pw, S(0));
  for (int r = 0; r < h; ++r) std::memcpy(dst + (size_t)(r + pad) * pw + pad, src + (size_t)r * w, sizeof(S) * (size_t)w);
}

// im2col, tap-major: col[(ci*k + kh)*k + kw][oh*OW + ow] for ci in [0, cig).
// Source is a stack of cig padded planes laid out contiguously.
template <typename S>
void im2col_kp(const S* padded, int cig, int ph, int pw, int k, int stride, int oh_n, int ow_n, S* col) {
  const int64_t p_total = (int64_t)oh_n * ow_n;
  int64_t row = 0;
  for (int ci = 0; ci < cig; ++ci) {
    const S* plane = padded + (size_t)ci * ph * pw;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw, ++row) {
        S* dst = col + row * p_total;
        for (int oh = 0; oh < oh_n; ++oh) {
          const S* src = plane + (size_t)(oh * stride + kh) * pw + kw;
          if (stride == 1) {
            std::memcpy(dst, src, sizeof(S) * (size_t)ow_n);
          } else {
            for (int ow = 0; ow < ow_n; ++ow) dst[ow] = src[(size_t)ow * stride];
          }
          dst += ow_n;
        }
      }
    }
  }
}

// im2col, position-major: col[oh*OW + ow][(ci*k + kh)*k + kw].
template <typename S>
void im2col_pk(const S* padded, int cig, int ph, int pw, int k, int stride, int oh_n, int ow_n, S* col) {
  const int kdim = cig * k * k;
  for (int oh = 0; oh < oh_n; ++oh) {
    for (int ow = 0; ow < ow_n; ++ow) {
      S* dst = col + ((size_t)oh * ow_n + ow) * kdim;
      for (int ci = 0; ci < cig; ++ci) {
        const S* plane = padded + (size_t)ci * ph * pw;
        for (int kh = 0; kh < k; ++kh) {
          const S* src = plane + (size_t)(oh * stride + kh) * pw + ow * stride;
          for (int kw = 0; kw < k; ++kw) *dst++ = src[kw];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d. x: [N, Cin, H, W], w: [Cout, Cin/groups, k, k], bias: [Cout] or null.
//
// Accumulation order per output element is fixed: taps in ascending
// (ci, kh, kw) order (ci within the channel group), each applied with
// std::fma, zero-extended padding taps included, bias added last. The
// im2col+GEMM path, the depthwise path and the pointwise path all realize
// this exact chain, so they agree bitwise with a naive loop that follows the
// same order.
// ---------------------------------------------------------------------------

template <typename S>
void conv2d_check(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias, const ConvSpec& spec) {
  if (x.ndim() != 4) throw shape_error("conv2d: input must be 4-d NCHW, got " + Tensor<S>::shape_str(x.shape));
  if (w.ndim() != 4) throw shape_error("conv2d: weight must be 4-d, got " + Tensor<S>::shape_str(w.shape));
  if (w.dim(2) != w.dim(3)) throw shape_error("conv2d: only square kernels supported");
  if (spec.stride < 1 || spec.padding < 0 || spec.groups < 1) throw shape_error("conv2d: bad stride/padding/groups");
  const int cin = x.dim(1), cout = w.dim(0);
  if (cin % spec.groups != 0 || cout % spec.groups != 0) {
    throw shape_error("conv2d: channels (" + std::to_string(cin) + "->" + std::to_string(cout) +
                      ") not divisible by groups " + std::to_string(spec.groups));
  }
  if (w.dim(1) != cin / spec.groups) {
    throw shape_error("conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels per group, input has " +
                      std::to_string(cin / spec.groups));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != cout)) throw shape_error("conv2d: bias shape mismatch");
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias, const ConvSpec& spec) {
  conv2d_check(x, w, bias, spec);
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  const int oh = conv_out_size(h, k, spec.stride, spec.padding);
  const int ow = conv_out_size(wd, k, spec.stride, spec.padding);
  const int64_t p_total = (int64_t)oh * ow;
  Tensor<S> y({n, cout, oh, ow});

  const bool depthwise = spec.groups == cin && cout == cin && spec.stride == 1;
  const bool pointwise = k == 1 && spec.groups == 1 && spec.stride == 1 && spec.padding == 0;
  const int cig = cin / spec.groups, cog = cout / spec.groups;
  const int ph = h + 2 * spec.padding, pw = wd + 2 * spec.padding;

  parallel_for(n, [&](int64_t ni) {
    const S* xi = x.ptr() + (size_t)ni * cin * h * wd;
    S* yi = y.ptr() + (size_t)ni * cout * p_total;
    if (pointwise) {
      // y[n] = w[Cout, Cin] * x[n][Cin, H*W], taps ascend ci.
      std::fill(yi, yi + (size_t)cout * p_total, S(0));
      gemm_accum(w.ptr(), xi, yi, cout, cin, (int)p_total);
    } else if (depthwise) {
      auto& padbuf = detail::scratch<S>(0);
      padbuf.resize((size_t)ph * pw);
      for (int c = 0; c < cin; ++c) {
        detail::pad_plane(xi + (size_t)c * h * wd, h, wd, spec.padding, padbuf.data());
        S* out_plane = yi + (size_t)c * p_total;
        std::fill(out_plane, out_plane + p_total, S(0));
        const S* wc = w.ptr() + (size_t)c * k * k;
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            const S wv = wc[kh * k + kw];
            for (int r = 0; r < oh; ++r) {
              const S* src = padbuf.data() + (size_t)(r + kh) * pw + kw;
              S* dst = out_plane + (size_t)r * ow;
              for (int c2 = 0; c2 < ow; ++c2) dst[c2] = std::fma(src[c2], wv, dst[c2]);
            }
          }
        }
      }
    } else {
      const int kdim = cig * k * k;
      auto& padbuf = detail::scratch<S>(0);
      auto& colbuf = detail::scratch<S>(1);
      padbuf.resize((size_t)cig * ph * pw);
      colbuf.resize((size_t)kdim * p_total);
      for (int g = 0; g < spec.groups; ++g) {
        for (int ci = 0; ci < cig; ++ci) {
          detail::pad_plane(xi + (size_t)(g * cig + ci) * h * wd, h, wd, spec.padding,
                            padbuf.data() + (size_t)ci * ph * pw);
        }
        detail::im2col_kp(padbuf.data(), cig, ph, pw, k, spec.stride, oh, ow, colbuf.data());
        S* yg = yi + (size_t)g * cog * p_total;
        std::fill(yg, yg + (size_t)cog * p_total, S(0));
        gemm_accum(w.ptr() + (size_t)g * cog * kdim, colbuf.data(), yg, cog, kdim, (int)p_total);
      }
    }
    if (bias) {
      for (int co = 0; co < cout; ++co) {
        const S b = bias->data[(size_t)co];
        S* row = yi + (size_t)co * p_total;
        for (int64_t p = 0; p < p_total; ++p) row[p] += b;
      }
    }
  });
  return y;
}

template <typename S>
void conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, bool has_bias, const ConvSpec& spec,
                     const Tensor<S>& gy, Tensor<S>* gx, Tensor<S>* gw, Tensor<S>* gb) {
  conv2d_check(x, w, (const Tensor<S>*)nullptr, spec);
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  const int oh = conv_out_size(h, k, spec.stride, spec.padding);
  const int ow = conv_out_size(wd, k, spec.stride, spec.padding);
  if (gy.shape != std::vector<int>({n, cout, oh, ow})) {
    throw shape_error("conv2d_backward: grad shape " + Tensor<S>::shape_str(gy.shape) + " does not match output");
  }
  const int64_t p_total = (int64_t)oh * ow;
  const int cig = cin / spec.groups, cog = cout / spec.groups;
  const int kdim = cig * k * k;
  const int ph = h + 2 * spec.padding, pw = wd + 2 * spec.padding;
  const bool depthwise = spec.groups == cin && cout == cin && spec.stride == 1;

  if (gb) {
    *gb = Tensor<S>({cout});
    for (int64_t ni = 0; ni < n; ++ni) {
      const S* gyi = gy.ptr() + (size_t)ni * cout * p_total;
      for (int co = 0; co < cout; ++co) {
        S acc = gb->data[(size_t)co];
        const S* row = gyi + (size_t)co * p_total;
        for (int64_t p = 0; p < p_total; ++p) acc += row[p];
        gb->data[(size_t)co] = acc;
      }
    }
    (void)has_bias;
  }

  if (gw) {
    *gw = Tensor<S>(w.shape);
    if (depthwise) {
      // Per (c, kh, kw): lane-wise accumulate over rows, then reduce lanes in
      // ascending order. Image index ascends serially, so the result is
      // independent of thread count.
      auto& padbuf = detail::scratch<S>(0);
      padbuf.resize((size_t)ph * pw);
      std::vector<S> lane((size_t)ow);
      for (int c = 0; c < cin; ++c) {
        S* gwc = gw->ptr() + (size_t)c * k * k;
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            std::fill(lane.begin(), lane.end(), S(0));
            for (int64_t ni = 0; ni < n; ++ni) {
              detail::pad_plane(x.ptr() + ((size_t)ni * cin + c) * h * wd, h, wd, spec.padding, padbuf.data());
              const S* gplane = gy.ptr() + ((size_t)ni * cout + c) * p_total;
              for (int r = 0; r < oh; ++r) {
                const S* src = padbuf.data() + (size_t)(r + kh) * pw + kw;
                const S* grow = gplane + (size_t)r * ow;
                for (int c2 = 0; c2 < ow; ++c2) lane[(size_t)c2] = std::fma(src[c2], grow[c2], lane[(size_t)c2]);
              }
            }
            S acc = 0;
            for (int c2 = 0; c2 < ow; ++c2) acc += lane[(size_t)c2];
            gwc[kh * k + kw] = acc;
          }
        }
      }
    } else {
      auto& padbuf = detail::scratch<S>(0);
      auto& colbuf = detail::scratch<S>(1);
      padbuf.resize((size_t)cig * ph * pw);
      colbuf.resize((size_t)p_total * kdim);
      for (int64_t ni = 0; ni < n; ++ni) {
        const S* xi = x.ptr() + (size_t)ni * cin * h * wd;
        const S* gyi = gy.ptr() + (size_t)ni * cout * p_total;
        for (int g = 0; g < spec.groups; ++g) {
          for (int ci = 0; ci < cig; ++ci) {
            detail::pad_plane(xi + (size_t)(g * cig + ci) * h * wd, h, wd, spec.padding,
                              padbuf.data() + (size_t)ci * ph * pw);
          }
          detail::im2col_pk(padbuf.data(), cig, ph, pw, k, spec.stride, oh, ow, colbuf.data());
          gemm_accum(gyi + (size_t)g * cog * p_total, colbuf.data(), gw->ptr() + (size_t)g * cog * kdim, cog,
                     (int)p_total, kdim);
        }
      }
    }
  }

  if (gx) {
    *gx = Tensor<S>(x.shape);
    if (depthwise) {
      parallel_for(n, [&](int64_t ni) {
        auto& gpad_local = detail::scratch<S>(2);
        gpad_local.resize((size_t)ph * pw);
        for (int c = 0; c < cin; ++c) {
          std::fill(gpad_local.begin(), gpad_local.end(), S(0));
          const S* gplane = gy.ptr() + ((size_t)ni * cout + c) * p_total;
          const S* wc = w.ptr() + (size_t)c * k * k;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const S wv = wc[kh * k + kw];
              for (int r = 0; r < oh; ++r) {
                S* dst = gpad_local.data() + (size_t)(r + kh) * pw + kw;
                const S* grow = gplane + (size_t)r * ow;
                for (int c2 = 0; c2 < ow; ++c2) dst[c2] = std::fma(grow[c2], wv, dst[c2]);
              }
            }
          }
          S* gxp = gx->ptr() + ((size_t)ni * cin + c) * h * wd;
          for (int r = 0; r < h; ++r) {
            std::memcpy(gxp + (size_t)r * wd, gpad_local.data() + (size_t)(r + spec.padding) * pw + spec.padding,
                        sizeof(S) * (size_t)wd);
          }
        }
      });
    } else {
      // wT[g]: [kdim, cog] from w[g]: [cog, kdim].
      std::vector<S> wt((size_t)spec.groups * kdim * cog);
      for (int g = 0; g < spec.groups; ++g) {
        const S* wg = w.ptr() + (size_t)g * cog * kdim;
        S* wtg = wt.data() + (size_t)g * kdim * cog;
        for (int co = 0; co < cog; ++co)
          for (int kk = 0; kk < kdim; ++kk) wtg[(size_t)kk * cog + co] = wg[(size_t)co * kdim + kk];
      }
      parallel_for(n, [&](int64_t ni) {
        auto& gcol = detail::scratch<S>(1);
        auto& gpad = detail::scratch<S>(2);
        gcol.resize((size_t)kdim * p_total);
        gpad.resize((size_t)ph * pw);
        const S* gyi = gy.ptr() + (size_t)ni * cout * p_total;
        S* gxi = gx->ptr() + (size_t)ni * cin * h * wd;
        for (int g = 0; g < spec.groups; ++g) {
          std::fill(gcol.begin(), gcol.end(), S(0));
          gemm_accum(wt.data() + (size_t)g * kdim * cog, gyi + (size_t)g * cog * p_total, gcol.data(), kdim, cog,
                     (int)p_total);
          for (int ci = 0; ci < cig; ++ci) {
            std::fill(gpad.begin(), gpad.end(), S(0));
            for (int kh = 0; kh < k; ++kh) {
              for (int kw = 0; kw < k; ++kw) {
                const S* src = gcol.data() + (size_t)((ci * k + kh) * k + kw) * p_total;
                for (int r = 0; r < oh; ++r) {
                  S* dst = gpad.data() + (size_t)(r * spec.stride + kh) * pw + kw;
                  const S* srow = src + (size_t)r * ow;
                  if (spec.stride == 1) {
                    for (int c2 = 0; c2 < ow; ++c2) dst[c2] += srow[c2];
                  } else {
                    for (int c2 = 0; c2 < ow; ++c2) dst[(size_t)c2 * spec.stride] += srow[c2];
                  }
                }
              }
            }
            S* gxp = gxi + (size_t)(g * cig + ci) * h * wd;
            for (int r = 0; r < h; ++r) {
              std::memcpy(gxp + (size_t)r * wd, gpad.data() + (size_t)(r + spec.padding) * pw + spec.padding,
                          sizeof(S) * (size_t)wd);
            }
          }
        }
      });
    }
  }
}

// ---------------------------------------------------------------------------
// Normalization layers.
// ---------------------------------------------------------------------------

// BatchNorm over (N, H, W) per channel for 4-d input. Training mode uses the
// biased batch variance for normalization and updates running stats with the
// unbiased variance (PyTorch convention): running <- (1-m)*running + m*batch.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, Tensor<S>& running_mean,
                     Tensor<S>& running_var, S momentum, S eps, bool training, Tensor<S>* save_mean = nullptr,
                     Tensor<S>* save_invstd = nullptr) {
  if (x.ndim() != 4) throw shape_error("batch_norm: input must be 4-d NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw shape_error("batch_norm: parameter size does not match " + std::to_string(c) + " channels");
  }
  const int64_t m_count = (int64_t)n * h * w;
  Tensor<S> y(x.shape);
  Tensor<S> mean({c}), invstd({c});
  const int64_t plane = (int64_t)h * w;
  for (int ci = 0; ci < c; ++ci) {
    S mu, var;
    if (training) {
      if (m_count < 2) throw shape_error("batch_norm: training mode needs at least 2 elements per channel");
      S sum = 0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const S* p = x.ptr() + ((size_t)ni * c + ci) * plane;
        for (int64_t i = 0; i < plane; ++i) sum += p[i];
      }
      mu = sum / (S)m_count;
      S sq = 0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const S* p = x.ptr() + ((size_t)ni * c + ci) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const S d = p[i] - mu;
          sq += d * d;
        }
      }
      var = sq / (S)m_count;
      const S var_unbiased = sq / (S)(m_count - 1);
      running_mean.data[(size_t)ci] = (S(1) - momentum) * running_mean.data[(size_t)ci] + momentum * mu;
      running_var.data[(size_t)ci] = (S(1) - momentum) * running_var.data[(size_t)ci] + momentum * var_unbiased;
    } else {
      mu = running_mean.data[(size_t)ci];
      var = running_var.data[(size_t)ci];
    }
    const S is = S(1) / std::sqrt(var + eps);
    mean.data[(size_t)ci] = mu;
    invstd.data[(size_t)ci] = is;
    const S g = gamma.data[(size_t)ci], b = beta.data[(size_t)ci];
    for (int64_t ni = 0; ni < n; ++ni) {
      const S* p = x.ptr() + ((size_t)ni * c + ci) * plane;
      S* q = y.ptr() + ((size_t)ni * c + ci) * plane;
      for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * g + b;
    }
  }
  if (save_mean) *save_mean = std::move(mean);
  if (save_invstd) *save_invstd = std::move(invstd);
  return y;
}

// Backward through batch_norm. `training` selects whether mean/invstd were
// batch statistics (full backward) or running constants (affine backward).
template <typename S>
void batch_norm_backward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& mean, const Tensor<S>& invstd,
                         bool training, const Tensor<S>& gy, Tensor<S>* gx, Tensor<S>* ggamma, Tensor<S>* gbeta) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t plane = (int64_t)h * w;
  const int64_t m_count = (int64_t)n * h * w;
  if (gx) *gx = Tensor<S>(x.shape);
  if (ggamma) *ggamma = Tensor<S>({c});
  if (gbeta) *gbeta = Tensor<S>({c});
  for (int ci = 0; ci < c; ++ci) {
    const S mu = mean.data[(size_t)ci], is = invstd.data[(size_t)ci], g = gamma.data[(size_t)ci];
    S sum_gy = 0, sum_gy_xhat = 0;
    for (int64_t ni = 0; ni < n; ++ni) {
      const S* xp = x.ptr() + ((size_t)ni * c + ci) * plane;
      const S* gp = gy.ptr() + ((size_t)ni * c + ci) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum_gy += gp[i];
        sum_gy_xhat += gp[i] * (xp[i] - mu) * is;
      }
    }
    if (ggamma) ggamma->data[(size_t)ci] = sum_gy_xhat;
    if (gbeta) gbeta->data[(size_t)ci] = sum_gy;
    if (gx) {
      if (training) {
        const S inv_m = S(1) / (S)m_count;
        for (int64_t ni = 0; ni < n; ++ni) {
          const S* xp = x.ptr() + ((size_t)ni * c + ci) * plane;
          const S* gp = gy.ptr() + ((size_t)ni * c + ci) * plane;
          S* op = gx->ptr() + ((size_t)ni * c + ci) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            const S xhat = (xp[i] - mu) * is;
            op[i] = g * is * (gp[i] - inv_m * sum_gy - xhat * inv_m * sum_gy_xhat);
          }
        }
      } else {
        const S scale = g * is;
        for (int64_t ni = 0; ni < n; ++ni) {
          const S* gp = gy.ptr() + ((size_t)ni * c + ci) * plane;
          S* op = gx->ptr() + ((size_t)ni * c + ci) * plane;
          for (int64_t i = 0; i < plane; ++i) op[i] = gp[i] * scale;
        }
      }
    }
  }
}

// LayerNorm over the channel dimension: for 4-d NCHW input each (n, h, w)
// position is normalized across C; for 2-d [N, D] input each row is
// normalized across D. gamma/beta have C (resp. D) elements.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps,
                     Tensor<S>* save_mean = nullptr, Tensor<S>* save_invstd = nullptr) {
  int c, rows, inner;
  if (x.ndim() == 4) {
    c = x.dim(1);
    rows = x.dim(0);
    inner = x.dim(2) * x.dim(3);
  } else if (x.ndim() == 2) {
    c = x.dim(1);
    rows = x.dim(0);
    inner = 1;
  } else {
    throw shape_error("layer_norm: input must be 2-d or 4-d");
  }
  if (gamma.numel() != c || beta.numel() != c) throw shape_error("layer_norm: parameter size mismatch");
  Tensor<S> y(x.shape);
  Tensor<S> mean({rows, inner}), invstd({rows, inner});
  for (int r = 0; r < rows; ++r) {
    for (int i = 0; i < inner; ++i) {
      const S* base = x.ptr() + ((size_t)r * c) * inner + i;
      S sum = 0;
      for (int ci = 0; ci < c; ++ci) sum += base[(size_t)ci * inner];
      const S mu = sum / (S)c;
      S sq = 0;
      for (int ci = 0; ci < c; ++ci) {
        const S d = base[(size_t)ci * inner] - mu;
        sq += d * d;
      }
      const S is = S(1) / std::sqrt(sq / (S)c + eps);
      mean.data[(size_t)r * inner + i] = mu;
      invstd.data[(size_t)r * inner + i] = is;
      S* out = y.ptr() + ((size_t)r * c) * inner + i;
      for (int ci = 0; ci < c; ++ci) {
        out[(size_t)ci * inner] =
            (base[(size_t)ci * inner] - mu) * is * gamma.data[(size_t)ci] + beta.data[(size_t)ci];
      }
    }
  }
  if (save_mean) *save_mean = std::move(mean);
  if (save_invstd) *save_invstd = std::move(invstd);
  return y;
}

template <typename S>
void layer_norm_backward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& mean, const Tensor<S>& invstd,
                         const Tensor<S>& gy, Tensor<S>* gx, Tensor<S>* ggamma, Tensor<S>* gbeta) {
  int c, rows, inner;
  if (x.ndim() == 4) {
    c = x.dim(1);
    rows = x.dim(0);
    inner = x.dim(2) * x.dim(3);
  } else {
    c = x.dim(1);
    rows = x.dim(0);
    inner = 1;
  }
  if (gx) *gx = Tensor<S>(x.shape);
  if (ggamma) *ggamma = Tensor<S>({c});
  if (gbeta) *gbeta = Tensor<S>({c});
  for (int r = 0; r < rows; ++r) {
    for (int i = 0; i < inner; ++i) {
      const S* base = x.ptr() + ((size_t)r * c) * inner + i;
      const S* gbase = gy.ptr() + ((size_t)r * c) * inner + i;
      const S mu = mean.data[(size_t)r * inner + i];
      const S is = invstd.data[(size_t)r * inner + i];
      S sum_gh = 0, sum_gh_xhat = 0;
      for (int ci = 0; ci < c; ++ci) {
        const S xhat = (base[(size_t)ci * inner] - mu) * is;
        const S gh = gbase[(size_t)ci * inner] * gamma.data[(size_t)ci];
        sum_gh += gh;
        sum_gh_xhat += gh * xhat;
        if (ggamma) ggamma->data[(size_t)ci] += gbase[(size_t)ci * inner] * xhat;
        if (gbeta) gbeta->data[(size_t)ci] += gbase[(size_t)ci * inner];
      }
      if (gx) {
        S* out = gx->ptr() + ((size_t)r * c) * inner + i;
        const S inv_c = S(1) / (S)c;
        for (int ci = 0; ci < c; ++ci) {
          const S xhat = (base[(size_t)ci * inner] - mu) * is;
          const S gh = gbase[(size_t)ci * inner] * gamma.data[(size_t)ci];
          out[(size_t)ci * inner] = is * (gh - inv_c * sum_gh - xhat * inv_c * sum_gh_xhat);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearity and linear maps.
// ---------------------------------------------------------------------------

// Exact (erf-based) GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> y(x.shape);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = (double)x.data[(size_t)i];
    y.data[(size_t)i] = (S)(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return y;
}

template <typename S>
void gelu_backward(const Tensor<S>& x, const Tensor<S>& gy, Tensor<S>* gx) {
  *gx = Tensor<S>(x.shape);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = (double)x.data[(size_t)i];
    const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
    const double pdf = std::exp(-0.5 * v * v) * inv_sqrt2pi;
    gx->data[(size_t)i] = (S)((cdf + v * pdf) * (double)gy.data[(size_t)i]);
  }
}

// y = x * w^T + b. x: [N, Din], w: [Dout, Din], b: [Dout] or null.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b) {
  if (x.ndim() != 2 || w.ndim() != 2) throw shape_error("linear: expects 2-d input and weight");
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (w.dim(1) != din) throw shape_error("linear: weight expects " + std::to_string(w.dim(1)) + " inputs, got " + std::to_string(din));
  if (b && b->numel() != dout) throw shape_error("linear: bias size mismatch");
  // Transpose w once so the GEMM k-loop is unit-stride in both operands.
  std::vector<S> wt((size_t)din * dout);
  for (int o = 0; o < dout; ++o)
    for (int d = 0; d < din; ++d) wt[(size_t)d * dout + o] = w.data[(size_t)o * din + d];
  Tensor<S> y({n, dout});
  gemm_accum(x.ptr(), wt.data(), y.ptr(), n, din, dout);
  if (b) {
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < dout; ++o) y.data[(size_t)r * dout + o] += b->data[(size_t)o];
  }
  return y;
}

template <typename S>
void linear_backward(const Tensor<S>& x, const Tensor<S>& w, bool has_bias, const Tensor<S>& gy, Tensor<S>* gx,
                     Tensor<S>* gw, Tensor<S>* gb) {
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (gx) {
    *gx = Tensor<S>({n, din});
    gemm_accum(gy.ptr(), w.ptr(), gx->ptr(), n, dout, din);
  }
  if (gw) {
    // gw[o, d] = sum_n gy[n, o] * x[n, d]; transpose gy once.
    std::vector<S> gyt((size_t)dout * n);
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < dout; ++o) gyt[(size_t)o * n + r] = gy.data[(size_t)r * dout + o];
    *gw = Tensor<S>({dout, din});
    gemm_accum(gyt.data(), x.ptr(), gw->ptr(), dout, n, din);
  }
  if (gb && has_bias) {
    *gb = Tensor<S>({dout});
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < dout; ++o) gb->data[(size_t)o] += gy.data[(size_t)r * dout + o];
  }
}

// Weight-normalized linear map without bias: w_k = gain_k * dir_k / ||dir_k||.
template <typename S>
Tensor<S> weight_norm_linear(const Tensor<S>& x, const Tensor<S>& dir, const Tensor<S>& gain,
                             Tensor<S>* save_w = nullptr) {
  if (dir.ndim() != 2 || gain.numel() != dir.dim(0)) throw shape_error("weight_norm_linear: bad dir/gain shapes");
  const int k = dir.dim(0), d = dir.dim(1);
  Tensor<S> w({k, d});
  for (int r = 0; r < k; ++r) {
    const S* vr = dir.ptr() + (size_t)r * d;
    S sq = 0;
    for (int i = 0; i < d; ++i) sq += vr[i] * vr[i];
    const S nrm = std::max(std::sqrt(sq), (S)1e-12);
    const S scale = gain.data[(size_t)r] / nrm;
    for (int i = 0; i < d; ++i) w.data[(size_t)r * d + i] = vr[i] * scale;
  }
  Tensor<S> y = linear(x, w, (const Tensor<S>*)nullptr);
  if (save_w) *save_w = std::move(w);
  return y;
}

template <typename S>
void weight_norm_linear_backward(const Tensor<S>& x, const Tensor<S>& dir, const Tensor<S>& gain, const Tensor<S>& gy,
                                 Tensor<S>* gx, Tensor<S>* gdir, Tensor<S>* ggain) {
  const int k = dir.dim(0), d = dir.dim(1);
  Tensor<S> w({k, d});
  std::vector<S> norms((size_t)k);
  for (int r = 0; r < k; ++r) {
    const S* vr = dir.ptr() + (size_t)r * d;
    S sq = 0;
    for (int i = 0; i < d; ++i) sq += vr[i] * vr[i];
    norms[(size_t)r] = std::max(std::sqrt(sq), (S)1e-12);
    const S scale = gain.data[(size_t)r] / norms[(size_t)r];
    for (int i = 0; i < d; ++i) w.data[(size_t)r * d + i] = vr[i] * scale;
  }
  Tensor<S> gw;
  linear_backward(x, w, false, gy, gx, &gw, (Tensor<S>*)nullptr);
  if (ggain) *ggain = Tensor<S>({k});
  if (gdir) *gdir = Tensor<S>({k, d});
  for (int r = 0; r < k; ++r) {
    const S* vr = dir.ptr() + (size_t)r * d;
    const S* gwr = gw.ptr() + (size_t)r * d;
    const S nrm = norms[(size_t)r];
    S gw_dot_v = 0;
    for (int i = 0; i < d; ++i) gw_dot_v += gwr[i] * vr[i];
    if (ggain) ggain->data[(size_t)r] = gw_dot_v / nrm;
    if (gdir) {
      const S scale = gain.data[(size_t)r] / nrm;
      const S proj = gw_dot_v / (nrm * nrm);
      for (int i = 0; i < d; ++i) gdir->data[(size_t)r * d + i] = scale * (gwr[i] - proj * vr[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Softmax family (row-wise over 2-d input), pooling, normalization, losses.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, S temperature) {
  if (x.ndim() != 2) throw shape_error("log_softmax: expects 2-d input");
  if (!(temperature > S(0))) throw shape_error("log_softmax: temperature must be positive");
  const int n = x.dim(0), k = x.dim(1);
  Tensor<S> y(x.shape);
  for (int r = 0; r < n; ++r) {
    const S* row = x.ptr() + (size_t)r * k;
    S* out = y.ptr() + (size_t)r * k;
    S mx = row[0] / temperature;
    for (int i = 1; i < k; ++i) mx = std::max(mx, row[i] / temperature);
    S sum = 0;
    for (int i = 0; i < k; ++i) sum += std::exp(row[i] / temperature - mx);
    const S lse = mx + std::log(sum);
    for (int i = 0; i < k; ++i) out[i] = row[i] / temperature - lse;
  }
  return y;
}

// logp is the op output saved from the forward pass.
template <typename S>
void log_softmax_backward(const Tensor<S>& logp, S temperature, const Tensor<S>& gy, Tensor<S>* gx) {
  const int n = logp.dim(0), k = logp.dim(1);
  *gx = Tensor<S>(logp.shape);
  for (int r = 0; r < n; ++r) {
    const S* lp = logp.ptr() + (size_t)r * k;
    const S* g = gy.ptr() + (size_t)r * k;
    S gsum = 0;
    for (int i = 0; i < k; ++i) gsum += g[i];
    S* out = gx->ptr() + (size_t)r * k;
    for (int i = 0; i < k; ++i) out[i] = (g[i] - std::exp(lp[i]) * gsum) / temperature;
  }
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, S temperature) {
  Tensor<S> y = log_softmax(x, temperature);
  for (auto& v : y.data) v = std::exp(v);
  return y;
}

// [N, C, H, W] -> [N, C] spatial mean.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.ndim() != 4) throw shape_error("global_avg_pool: expects 4-d input");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t plane = (int64_t)x.dim(2) * x.dim(3);
  Tensor<S> y({n, c});
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const S* p = x.ptr() + ((size_t)ni * c + ci) * plane;
      S sum = 0;
      for (int64_t i = 0; i < plane; ++i) sum += p[i];
      y.data[(size_t)ni * c + ci] = sum / (S)plane;
    }
  }
  return y;
}

template <typename S>
void global_avg_pool_backward(const std::vector<int>& xshape, const Tensor<S>& gy, Tensor<S>* gx) {
  const int n = xshape[0], c = xshape[1];
  const int64_t plane = (int64_t)xshape[2] * xshape[3];
  *gx = Tensor<S>(xshape);
  const S inv = S(1) / (S)plane;
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const S g = gy.data[(size_t)ni * c + ci] * inv;
      S* p = gx->ptr() + ((size_t)ni * c + ci) * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] = g;
    }
  }
}

// Row-wise y = x / max(||x||_2, eps).
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, S eps) {
  if (x.ndim() != 2) throw shape_error("l2_normalize: expects 2-d input");
  const int n = x.dim(0), d = x.dim(1);
  Tensor<S> y(x.shape);
  for (int r = 0; r < n; ++r) {
    const S* row = x.ptr() + (size_t)r * d;
    S sq = 0;
    for (int i = 0; i < d; ++i) sq += row[i] * row[i];
    const S denom = std::max(std::sqrt(sq), eps);
    S* out = y.ptr() + (size_t)r * d;
    for (int i = 0; i < d; ++i) out[i] = row[i] / denom;
  }
  return y;
}

template <typename S>
void l2_normalize_backward(const Tensor<S>& x, S eps, const Tensor<S>& gy, Tensor<S>* gx) {
  const int n = x.dim(0), d = x.dim(1);
  *gx = Tensor<S>(x.shape);
  for (int r = 0; r < n; ++r) {
    const S* row = x.ptr() + (size_t)r * d;
    const S* g = gy.ptr() + (size_t)r * d;
    S sq = 0, dot = 0;
    for (int i = 0; i < d; ++i) {
      sq += row[i] * row[i];
      dot += row[i] * g[i];
    }
    const S nrm = std::sqrt(sq);
    S* out = gx->ptr() + (size_t)r * d;
    if (nrm > eps) {
      const S inv = S(1) / nrm;
      const S inv3 = inv * inv * inv;
      for (int i = 0; i < d; ++i) out[i] = g[i] * inv - row[i] * dot * inv3;
    } else {
      // Below the clamp the denominator is the constant eps.
      for (int i = 0; i < d; ++i) out[i] = g[i] / eps;
    }
  }
}

// Mean over rows of -sum_k probs * logp. probs rows are expected to be valid
// distributions; logp rows come from log_softmax.
template <typename S>
S cross_entropy_with_probs(const Tensor<S>& logp, const Tensor<S>& probs) {
  check_same_shape(logp, probs, "cross_entropy_with_probs");
  const int n = logp.dim(0), k = logp.dim(1);
  S total = 0;
  for (int r = 0; r < n; ++r) {
    const S* lp = logp.ptr() + (size_t)r * k;
    const S* p = probs.ptr() + (size_t)r * k;
    S row = 0;
    for (int i = 0; i < k; ++i) row += p[i] * lp[i];
    total -= row;
  }
  return total / (S)n;
}

template <typename S>
void cross_entropy_with_probs_backward(const Tensor<S>& probs, S gloss, Tensor<S>* glogp) {
  const int n = probs.dim(0);
  *glogp = Tensor<S>(probs.shape);
  const S scale = -gloss / (S)n;
  for (int64_t i = 0; i < probs.numel(); ++i) glogp->data[(size_t)i] = scale * probs.data[(size_t)i];
}

// Mean over rows of -logp[r, label_r].
template <typename S>
S nll_loss(const Tensor<S>& logp, const std::vector<int>& labels) {
  const int n = logp.dim(0), k = logp.dim(1);
  if ((int)labels.size() != n) throw shape_error("nll_loss: label count mismatch");
  S total = 0;
  for (int r = 0; r < n; ++r) {
    const int y = labels[(size_t)r];
    if (y < 0 || y >= k) throw shape_error("nll_loss: label " + std::to_string(y) + " out of range");
    total -= logp(r, y);
  }
  return total / (S)n;
}

template <typename S>
void nll_loss_backward(const std::vector<int>& labels, int k, S gloss, Tensor<S>* glogp) {
  const int n = (int)labels.size();
  *glogp = Tensor<S>({n, k});
  const S scale = -gloss / (S)n;
  for (int r = 0; r < n; ++r) glogp->data[(size_t)r * k + labels[(size_t)r]] = scale;
}

}  // namespace bcssl::ops
