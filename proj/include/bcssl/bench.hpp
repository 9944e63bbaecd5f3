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

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "bcssl/config.hpp"
#include "bcssl/eval.hpp"

namespace bcssl {

// Forward-pass throughput microbenchmark. Method: eval-mode model, fixed
// input per row, warmup iterations untimed, then timed iterations on a
// monotonic clock, reporting the median. Before any timing, a correctness
// gate checks that BatchNorm folding leaves the pooled embedding unchanged
// within 1e-5 — a fast folded model that computes something else is not a
// result. Throughput numbers are machine-dependent and deliberately have no
// frozen expected values; only structure and the gate are asserted in tests.

struct BenchRow {
  std::string variant;
  int kernel_size = 0;
  bool folded = false;
  int batch = 0;
  double images_per_sec = 0;
  double ms_per_image = 0;
  int64_t param_count = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  int threads = 1;            // environment stamp
  std::string build_flags;    // environment stamp
  double gate_max_diff = 0;   // folded-vs-unfolded agreement actually measured
};

template <typename S>
int64_t param_count(Backbone<S>& bb) {
  int64_t n = 0;
  for (const auto* p : bb.params.all()) n += p->value.numel();
  return n;
}

namespace detail {

// One eval-mode inference: pooled embedding of a fixed batch.
template <typename S>
void bench_forward(Backbone<S>& bb, const Tensor<S>& x) {
  Tape<S> t(false);
  forward_pooled(bb, t, t.constant(x));
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Maximum absolute difference between the two models' pooled embeddings over
// n_inputs standard-normal images (stream keyed by (seed, "bench-gate", i)).
template <typename S>
double fold_agreement(Backbone<S>& a, Backbone<S>& b, int n_inputs, int resolution, uint64_t seed) {
  if (n_inputs < 1) throw config_error("fold_agreement needs at least one input");
  detail::EvalModeGuard<S> ga(a);
  detail::EvalModeGuard<S> gb(b);
  double worst = 0;
  for (int i = 0; i < n_inputs; ++i) {
    Rng rng(Rng::key_of({seed, fnv1a("bench-gate"), (uint64_t)i}));
    Tensor<S> x({1, 3, resolution, resolution});
    for (auto& v : x.data) v = (S)rng.normal();
    Tape<S> ta(false), tb(false);
    const Tensor<S>& ya = ta.val(forward_pooled(a, ta, ta.constant(x)));
    const Tensor<S>& yb = tb.val(forward_pooled(b, tb, tb.constant(std::move(x))));
    for (int64_t j = 0; j < ya.numel(); ++j) {
      worst = std::max(worst, (double)std::abs(ya.data[(size_t)j] - yb.data[(size_t)j]));
    }
  }
  return worst;
}

inline constexpr double kFoldGateTolerance = 1e-5;
inline constexpr int kFoldGateInputs = 100;

// Times eval-mode inference of `model` at each batch size; appends one row
// per batch to `rows`.
template <typename S>
void bench_model(Backbone<S>& model, const BenchSettings& bn, uint64_t seed, bool folded_label, int64_t params,
                 std::vector<BenchRow>& rows) {
  if (bn.timed_iters < 1) throw config_error("bench requires at least one timed iteration");
  if (bn.warmup_iters < 1) throw config_error("bench requires at least one warmup iteration");
  detail::EvalModeGuard<S> guard(model);
  for (int batch : bn.batches) {
    Rng rng(Rng::key_of({seed, fnv1a("bench-input"), (uint64_t)batch}));
    Tensor<S> x({batch, 3, bn.resolution, bn.resolution});
    for (auto& v : x.data) v = (S)rng.normal();

    for (int i = 0; i < bn.warmup_iters; ++i) detail::bench_forward(model, x);
    std::vector<double> secs((size_t)bn.timed_iters);
    for (int i = 0; i < bn.timed_iters; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      detail::bench_forward(model, x);
      const auto t1 = std::chrono::steady_clock::now();
      secs[(size_t)i] = std::chrono::duration<double>(t1 - t0).count();
    }
    const double med = detail::median_of(secs);
    BenchRow row;
    row.variant = model.cfg.variant;
    row.kernel_size = model.cfg.kernel_size;
    row.folded = folded_label;
    row.batch = batch;
    row.images_per_sec = (double)batch / med;
    row.ms_per_image = med * 1000.0 / (double)batch;
    row.param_count = params;
    rows.push_back(row);
  }
}

// Full benchmark for the configured backbone: correctness gate first (when
// the model has a BatchNorm to fold), then unfolded and folded timing rows.
inline BenchReport bench_throughput(const RunConfig& cfg) {
  cfg.validate();
  BenchReport rep;
  rep.threads = worker_count();
#ifdef BCSSL_BUILD_FLAGS
  rep.build_flags = BCSSL_BUILD_FLAGS;
#else
  rep.build_flags = "unknown";
#endif

  auto bb = build_backbone<float>(cfg.backbone, cfg.seed);
  const int64_t params = param_count(bb);
  if (cfg.backbone.use_bn_after_dw) {
    auto folded = fold_batchnorm(bb);
    rep.gate_max_diff = fold_agreement(bb, folded, kFoldGateInputs, cfg.bench.resolution, cfg.seed);
    if (!(rep.gate_max_diff < kFoldGateTolerance)) {
      throw numeric_error(detail::strf("bench correctness gate failed: folded vs unfolded max abs diff %.3g "
                                       "exceeds %.0e",
                                       rep.gate_max_diff, kFoldGateTolerance));
    }
    bench_model(bb, cfg.bench, cfg.seed, false, params, rep.rows);
    bench_model(folded, cfg.bench, cfg.seed, true, params, rep.rows);
  } else {
    bench_model(bb, cfg.bench, cfg.seed, false, params, rep.rows);
  }
  return rep;
}

inline constexpr const char* kBenchCsvHeader =
    "variant,kernel_size,folded,batch,images_per_sec,ms_per_image,param_count";

// CSV rendering with the environment stamp in comment lines. Timing columns
// are wall-clock and excluded from reproducibility guarantees; everything
// else is deterministic for a fixed config.
inline std::string bench_csv(const BenchReport& rep) {
  std::string out = detail::strf("# threads=%d\n# build_flags=%s\n", rep.threads, rep.build_flags.c_str());
  out += kBenchCsvHeader;
  out += '\n';
  for (const auto& r : rep.rows) {
    out += detail::strf("%s,%d,%d,%d,%.6g,%.6g,%lld\n", r.variant.c_str(), r.kernel_size, r.folded ? 1 : 0, r.batch,
                        r.images_per_sec, r.ms_per_image, (long long)r.param_count);
  }
  return out;
}

// Fixed-width stdout table.
inline std::string bench_table(const BenchReport& rep) {
  std::string out = detail::strf("%-8s %6s %7s %6s %12s %10s %12s\n", "variant", "kernel", "folded", "batch",
                                 "images/sec", "ms/image", "params");
  for (const auto& r : rep.rows) {
    out += detail::strf("%-8s %6d %7s %6d %12.2f %10.3f %12lld\n", r.variant.c_str(), r.kernel_size,
                        r.folded ? "yes" : "no", r.batch, r.images_per_sec, r.ms_per_image, (long long)r.param_count);
  }
  return out;
}

}  // namespace bcssl
