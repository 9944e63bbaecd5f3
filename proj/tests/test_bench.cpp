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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <sstream>

#include "bcssl/analysis.hpp"
#include "bcssl/bench.hpp"

using namespace bcssl;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

BackboneConfig mini_cfg(int kernel) {
  BackboneConfig cfg = BackboneConfig::nano(kernel, true);
  cfg.depths = {1, 1, 1, 1};
  cfg.dims = {8, 16, 32, 64};
  return cfg;
}

RunConfig mini_run_cfg() {
  RunConfig cfg;
  cfg.dataset = "unused.bcds";
  cfg.epochs = 1;
  cfg.lr = 0.001;
  cfg.backbone = mini_cfg(3);
  cfg.head.in_dim = cfg.backbone.feature_dim();
  cfg.bench.batches = {1, 2};
  cfg.bench.warmup_iters = 1;
  cfg.bench.timed_iters = 3;
  return cfg;
}

// Fills BatchNorm running stats with non-trivial values so folding actually
// rewrites the convolution weights.
void randomize_bn_buffers(Backbone<float>& bb, uint64_t seed) {
  Rng rng(Rng::key_of({seed, fnv1a("bn-buffers")}));
  for (auto& [name, buf] : bb.buffers()) {
    const bool is_var = name.find("running_var") != std::string::npos;
    for (auto& v : buf->data) {
      v = is_var ? (float)(std::abs(rng.normal()) + 0.5) : (float)(0.1 * rng.normal());
    }
  }
}

}  // namespace

TEST_CASE("parameter counts match the architecture") {
  auto nano = build_backbone<float>(BackboneConfig::nano(), 0);
  CHECK(param_count(nano) == 2227424);  // nano, 9x9 kernels, BatchNorm on

  auto mini = build_backbone<float>(mini_cfg(3), 0);
  CHECK(param_count(mini) == 57432);

  auto tiny = build_backbone<float>(BackboneConfig::tiny(), 0);
  const int64_t tiny_params = param_count(tiny);
  CHECK(tiny_params >= 27'000'000);
  CHECK(tiny_params <= 31'000'000);
}

TEST_CASE("the fold gate measures a real, tiny folding error") {
  BackboneConfig bc = mini_cfg(9);
  bc.layer_scale_init = 1.0;  // give the block branch real weight
  auto bb = build_backbone<float>(bc, 0);
  variance_preserving_init(bb, 3);
  randomize_bn_buffers(bb, 7);

  auto folded = fold_batchnorm(bb);
  const double gate = fold_agreement(bb, folded, 10, 64, 0);
  CHECK(gate > 0.0);                   // folding rewrites arithmetic
  CHECK(gate < kFoldGateTolerance);    // but agrees to well under 1e-5

  REQUIRE_THROWS_MATCHES(fold_agreement(bb, folded, 0, 64, 0), config_error,
                         MessageMatches(ContainsSubstring("at least one input")));
}

TEST_CASE("bench_model writes one self-consistent row per batch size") {
  auto bb = build_backbone<float>(mini_cfg(3), 0);
  const int64_t params = param_count(bb);
  BenchSettings bn;
  bn.batches = {1, 2, 4};
  bn.warmup_iters = 1;
  bn.timed_iters = 3;

  std::vector<BenchRow> rows;
  bench_model(bb, bn, 0, false, params, rows);
  REQUIRE(rows.size() == 3);
  for (size_t i = 0; i < rows.size(); ++i) {
    const BenchRow& r = rows[i];
    CHECK(r.batch == bn.batches[i]);
    CHECK(r.variant == "nano");
    CHECK(r.kernel_size == 3);
    CHECK_FALSE(r.folded);
    CHECK(r.param_count == params);
    CHECK(r.images_per_sec > 0.0);
    CHECK(std::isfinite(r.images_per_sec));
    // The two rates describe the same median time.
    CHECK(r.images_per_sec * r.ms_per_image == Approx(1000.0).epsilon(1e-9));
  }

  BenchSettings bad = bn;
  bad.timed_iters = 0;
  std::vector<BenchRow> sink;
  REQUIRE_THROWS_MATCHES(bench_model(bb, bad, 0, false, params, sink), config_error,
                         MessageMatches(ContainsSubstring("at least one timed iteration")));
  bad = bn;
  bad.warmup_iters = 0;
  REQUIRE_THROWS_MATCHES(bench_model(bb, bad, 0, false, params, sink), config_error,
                         MessageMatches(ContainsSubstring("at least one warmup iteration")));
}

TEST_CASE("bench_throughput gates folding, then times both variants") {
  const RunConfig cfg = mini_run_cfg();
  const BenchReport rep = bench_throughput(cfg);

  REQUIRE(rep.rows.size() == 4);  // 2 batches x {unfolded, folded}
  CHECK_FALSE(rep.rows[0].folded);
  CHECK_FALSE(rep.rows[1].folded);
  CHECK(rep.rows[2].folded);
  CHECK(rep.rows[3].folded);
  CHECK(rep.rows[0].batch == 1);
  CHECK(rep.rows[1].batch == 2);
  CHECK(rep.rows[2].batch == 1);
  CHECK(rep.rows[3].batch == 2);
  CHECK(rep.gate_max_diff >= 0.0);
  CHECK(rep.gate_max_diff < kFoldGateTolerance);
  CHECK(rep.threads == worker_count());
  CHECK_FALSE(rep.build_flags.empty());
  for (const auto& r : rep.rows) CHECK(r.param_count == rep.rows[0].param_count);

  SECTION("a BatchNorm-free model gets no folded rows") {
    RunConfig plain = cfg;
    plain.backbone.use_bn_after_dw = false;
    const BenchReport rep2 = bench_throughput(plain);
    REQUIRE(rep2.rows.size() == 2);
    CHECK_FALSE(rep2.rows[0].folded);
    CHECK_FALSE(rep2.rows[1].folded);
    CHECK(rep2.gate_max_diff == 0.0);
  }
}

TEST_CASE("the CSV stamps the environment and is stable across runs") {
  const RunConfig cfg = mini_run_cfg();
  const BenchReport a = bench_throughput(cfg);
  const BenchReport b = bench_throughput(cfg);

  const std::string csv = bench_csv(a);
  std::istringstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK_THAT(line, ContainsSubstring("# threads="));
  REQUIRE(std::getline(in, line));
  CHECK_THAT(line, ContainsSubstring("# build_flags="));
  REQUIRE(std::getline(in, line));
  CHECK(line == kBenchCsvHeader);
  int data_rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) ++data_rows;
  }
  CHECK(data_rows == (int)a.rows.size());

  // Everything except wall-clock timing is reproducible run to run.
  REQUIRE(a.rows.size() == b.rows.size());
  for (size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].variant == b.rows[i].variant);
    CHECK(a.rows[i].kernel_size == b.rows[i].kernel_size);
    CHECK(a.rows[i].folded == b.rows[i].folded);
    CHECK(a.rows[i].batch == b.rows[i].batch);
    CHECK(a.rows[i].param_count == b.rows[i].param_count);
  }
  CHECK(a.gate_max_diff == b.gate_max_diff);

  CHECK_THAT(bench_table(a), ContainsSubstring("images/sec"));
}
