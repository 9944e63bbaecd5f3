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

#include <filesystem>
#include <fstream>

#include "bcssl/eval.hpp"
#include "bcssl/trainer.hpp"
#include "oracles.hpp"

using namespace bcssl;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

BackboneConfig mini_backbone_cfg() {
  auto bc = BackboneConfig::nano(3, true);
  bc.depths = {1, 1, 1, 1};
  bc.dims = {8, 16, 32, 64};
  return bc;
}

Dataset mini_dataset(int classes, int per_class, uint64_t seed) {
  SynthSpec s;
  s.classes = classes;
  s.samples_per_class = per_class;
  s.image_size = 64;
  s.seed = seed;
  return generate_synthetic(s);
}

// Unit vector in dimension `d` with the given leading two components (the
// rest zero); a and b must satisfy a^2 + b^2 = 1.
Tensor<float> unit2(int d, double a, double b) {
  Tensor<float> v({1, d});
  v.data[0] = (float)a;
  v.data[1] = (float)b;
  return v;
}

FeatureBank tiny_bank(const std::vector<std::pair<std::array<double, 2>, int>>& rows, int d = 2) {
  FeatureBank fb;
  fb.features = Tensor<float>({(int)rows.size(), d});
  for (size_t r = 0; r < rows.size(); ++r) {
    fb.features.data[r * (size_t)d] = (float)rows[r].first[0];
    fb.features.data[r * (size_t)d + 1] = (float)rows[r].first[1];
    fb.labels.push_back(rows[r].second);
  }
  return fb;
}

// Random unit-norm bank with the given labels.
FeatureBank random_bank(int n, int d, uint64_t seed, const std::vector<int>& labels) {
  FeatureBank fb;
  fb.features = Tensor<float>({n, d});
  Rng rng(seed);
  for (int r = 0; r < n; ++r) {
    double sq = 0;
    std::vector<double> v((size_t)d);
    for (auto& x : v) {
      x = rng.normal();
      sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (int j = 0; j < d; ++j) fb.features.data[(size_t)(r * d + j)] = (float)(v[(size_t)j] * inv);
  }
  fb.labels = labels;
  return fb;
}

struct TmpDir {
  std::string path;
  explicit TmpDir(const std::string& name) : path("/tmp/bcssl_eval_" + name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TmpDir() { std::filesystem::remove_all(path); }
};

std::vector<char> slurp_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit_bytes(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), (std::streamsize)bytes.size());
  REQUIRE(out.good());
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) lines.push_back(l);
  return lines;
}

}  // namespace

TEST_CASE("feature bank validation guards the invariants") {
  auto fb = random_bank(4, 8, 1, {0, 1, 0, 1});
  REQUIRE_NOTHROW(fb.validate());

  SECTION("label count mismatch") {
    fb.labels.pop_back();
    REQUIRE_THROWS_AS(fb.validate(), shape_error);
  }
  SECTION("denormalized row") {
    fb.features.data[0] *= 1.5f;
    REQUIRE_THROWS_AS(fb.validate(), config_error);
  }
  SECTION("negative label") {
    fb.labels[2] = -1;
    REQUIRE_THROWS_AS(fb.validate(), config_error);
  }
  SECTION("empty bank") {
    FeatureBank empty;
    REQUIRE_THROWS_AS(empty.validate(), shape_error);
  }
}

TEST_CASE("extract_features is deterministic, normalized, and batch-size invariant") {
  auto ds = mini_dataset(2, 5, 9);  // N = 10
  auto bb = build_backbone<float>(mini_backbone_cfg(), 4);

  ExtractOptions opt;
  opt.batch_size = 32;
  auto bank = extract_features(bb, ds, opt);
  REQUIRE(bank.n() == 10);
  REQUIRE(bank.dim() == 64);
  REQUIRE_NOTHROW(bank.validate());
  for (int i = 0; i < 10; ++i) REQUIRE(bank.labels[(size_t)i] == (int)ds.labels[(size_t)i]);

  SECTION("repeat call is byte-identical") {
    auto again = extract_features(bb, ds, opt);
    REQUIRE(bitwise_equal(bank.features, again.features));
    REQUIRE(bank.model_hash == again.model_hash);
    REQUIRE(bank.data_hash == again.data_hash);
  }
  SECTION("batch size 1 matches batch size 32") {
    ExtractOptions one = opt;
    one.batch_size = 1;
    auto b1 = extract_features(bb, ds, one);
    REQUIRE(max_abs_diff(bank.features, b1.features) < 1e-6);
  }
  SECTION("duplicate images produce identical rows") {
    Dataset dup = ds;
    const auto numel = dup.image_numel();
    std::copy(dup.pixels.begin(), dup.pixels.begin() + (int64_t)numel,
              dup.pixels.begin() + (int64_t)(3 * numel));  // image 3 := image 0
    auto bank2 = extract_features(bb, dup, opt);
    Tensor<float> row0({1, 64}), row3({1, 64});
    std::copy(bank2.features.ptr(), bank2.features.ptr() + 64, row0.ptr());
    std::copy(bank2.features.ptr() + 3 * 64, bank2.features.ptr() + 4 * 64, row3.ptr());
    REQUIRE(bitwise_equal(row0, row3));
  }
  SECTION("extraction is pure: mode flag and BN stats restored") {
    bb.training = true;
    auto rm_before = bb.stages[0][0].bn->running_mean;
    auto again = extract_features(bb, ds, opt);
    REQUIRE(bb.training);
    REQUIRE(bitwise_equal(bb.stages[0][0].bn->running_mean, rm_before));
    REQUIRE(bitwise_equal(bank.features, again.features));  // eval path regardless of flag
  }
  SECTION("resolution must be a multiple of the reduction") {
    ExtractOptions bad = opt;
    bad.resolution = 48;
    REQUIRE_THROWS_AS(extract_features(bb, ds, bad), config_error);
    bad.resolution = 0;
    REQUIRE_THROWS_AS(extract_features(bb, ds, bad), config_error);
  }
  SECTION("different weights change the model fingerprint") {
    auto bb2 = build_backbone<float>(mini_backbone_cfg(), 5);
    auto bank2 = extract_features(bb2, ds, opt);
    REQUIRE(bank.model_hash != bank2.model_hash);
    REQUIRE(bank.data_hash == bank2.data_hash);
  }
}

TEST_CASE("weighted k-NN matches the closed-form vote") {
  // Bank rows engineered for exact similarities 0.9 (class 0), 0.8 and 0.7
  // (class 1) against the query (1, 0).
  auto fb = tiny_bank({
      {{0.9, std::sqrt(1 - 0.81)}, 0},
      {{0.8, std::sqrt(1 - 0.64)}, 1},
      {{0.7, std::sqrt(1 - 0.49)}, 1},
  });
  auto query = unit2(2, 1.0, 0.0);
  KnnOptions opt;
  opt.k = 3;
  opt.tau = 0.07;

  // Brute-force evaluation of the decision rule.
  const double s0 = (double)fb.features.data[0];
  const double s1 = (double)fb.features.data[2];
  const double s2 = (double)fb.features.data[4];
  const double score_a = std::exp(s0 / opt.tau);
  const double score_b = std::exp(s1 / opt.tau) + std::exp(s2 / opt.tau);
  REQUIRE(score_a > score_b);  // e^{12.86} vs e^{11.43} + e^{10}
  REQUIRE(knn_classify(fb, query, 2, opt) == std::vector<int>{0});

  SECTION("plain majority vote flips the same case") {
    opt.weighted = false;
    REQUIRE(knn_classify(fb, query, 2, opt) == std::vector<int>{1});  // two class-1 neighbors
  }
  SECTION("query equal to a bank row with k = 1 returns that row's label") {
    opt.k = 1;
    Tensor<float> q({1, 2});
    q.data[0] = fb.features.data[2];
    q.data[1] = fb.features.data[3];
    REQUIRE(knn_classify(fb, q, 2, opt) == std::vector<int>{1});
  }
  SECTION("a one-point bank labels every query with its class") {
    auto one = tiny_bank({{{0.0, 1.0}, 1}});
    KnnOptions k1;
    k1.k = 1;
    Tensor<float> qs({3, 2});
    qs.data = {1.f, 0.f, 0.f, -1.f, -1.f, 0.f};
    REQUIRE(knn_classify(one, qs, 2, k1) == std::vector<int>{1, 1, 1});
  }
}

TEST_CASE("k-NN input validation") {
  auto fb = random_bank(6, 4, 2, {0, 0, 1, 1, 2, 2});
  auto q = random_bank(2, 4, 3, {0, 0});
  KnnOptions opt;
  opt.k = 3;
  REQUIRE_NOTHROW(knn_classify(fb, q.features, 3, opt));

  opt.k = 7;  // > N
  REQUIRE_THROWS_AS(knn_classify(fb, q.features, 3, opt), config_error);
  opt.k = 0;
  REQUIRE_THROWS_AS(knn_classify(fb, q.features, 3, opt), config_error);
  opt.k = 3;
  opt.tau = 0.0;
  REQUIRE_THROWS_AS(knn_classify(fb, q.features, 3, opt), config_error);
  opt.tau = 0.07;
  REQUIRE_THROWS_AS(knn_classify(fb, q.features, 0, opt), config_error);   // num_classes
  REQUIRE_THROWS_AS(knn_classify(fb, q.features, 2, opt), config_error);   // label 2 >= 2
  auto wide = random_bank(2, 5, 4, {0, 0});
  REQUIRE_THROWS_AS(knn_classify(fb, wide.features, 3, opt), shape_error);  // dim mismatch
}

TEST_CASE("k-NN properties: rescale invariance and the tau -> inf limit") {
  const int n = 24, d = 8, m = 10;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(i % 3);
  auto fb = random_bank(n, d, 11, labels);

  auto raw = oracle::randn<float>({m, d}, 12);
  auto normalize_rows = [&](const Tensor<float>& x, double pre_scale) {
    Tensor<float> y(x.shape);
    for (int r = 0; r < m; ++r) {
      double sq = 0;
      for (int j = 0; j < d; ++j) {
        const double v = (double)x.data[(size_t)(r * d + j)] * pre_scale;
        sq += v * v;
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (int j = 0; j < d; ++j) y.data[(size_t)(r * d + j)] = (float)(x.data[(size_t)(r * d + j)] * pre_scale * inv);
    }
    return y;
  };
  KnnOptions opt;
  opt.k = 5;
  REQUIRE(knn_classify(fb, normalize_rows(raw, 1.0), 3, opt) == knn_classify(fb, normalize_rows(raw, 3.7), 3, opt));

  SECTION("k = N with huge tau degenerates to the majority class") {
    std::vector<int> skew;  // 9 of class 0, 15 of class 1
    for (int i = 0; i < n; ++i) skew.push_back(i < 9 ? 0 : 1);
    auto fb2 = random_bank(n, d, 13, skew);
    KnnOptions lim;
    lim.k = n;
    lim.tau = 1e6;
    auto pred = knn_classify(fb2, normalize_rows(raw, 1.0), 2, lim);
    for (int p : pred) REQUIRE(p == 1);
  }
}

TEST_CASE("knn_accuracy on hand-built clusters") {
  // Two tight clusters: class 0 hugs e1, class 1 hugs e2.
  auto make = [&](int per_class, uint64_t seed) {
    FeatureBank fb;
    const int d = 4;
    fb.features = Tensor<float>({2 * per_class, d});
    Rng rng(seed);
    for (int i = 0; i < 2 * per_class; ++i) {
      const int cls = i < per_class ? 0 : 1;
      double v[4] = {0, 0, 0, 0};
      v[cls] = 1.0;
      v[2] = 0.05 * rng.normal();
      v[3] = 0.05 * rng.normal();
      const double inv = 1.0 / std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
      for (int j = 0; j < d; ++j) fb.features.data[(size_t)(i * d + j)] = (float)(v[j] * inv);
      fb.labels.push_back(cls);
    }
    return fb;
  };
  auto bank = make(20, 21);
  auto queries = make(10, 22);
  KnnOptions opt;
  opt.k = 5;
  REQUIRE(knn_accuracy(bank, queries, 2, opt) == 1.0);

  // Flipping half the query labels halves the score.
  for (int i = 0; i < 5; ++i) queries.labels[(size_t)i] = 1;
  REQUIRE(knn_accuracy(bank, queries, 2, opt) == Catch::Approx(0.75));
}

TEST_CASE("feature bank file round-trip and corruption handling") {
  TmpDir tmp("bank");
  auto fb = random_bank(5, 3, 31, {0, 1, 2, 1, 0});
  fb.model_hash = 0xabcdef0123456789ULL;
  fb.data_hash = 0x1122334455667788ULL;
  const std::string path = tmp.path + "/bank.bcfb";
  save_feature_bank(fb, path);

  auto back = load_feature_bank(path);
  REQUIRE(bitwise_equal(back.features, fb.features));
  REQUIRE(back.labels == fb.labels);
  REQUIRE(back.model_hash == fb.model_hash);
  REQUIRE(back.data_hash == fb.data_hash);

  const std::string again = tmp.path + "/bank2.bcfb";
  save_feature_bank(back, again);
  REQUIRE(slurp_bytes(path) == slurp_bytes(again));

  const auto clean = slurp_bytes(path);
  // Layout: magic(4) version(4) n(4) d(4) labels(4x5) features(4x15) hashes(16).
  REQUIRE(clean.size() == 4 + 4 + 4 + 4 + 20 + 60 + 16);

  SECTION("bad magic") {
    auto bytes = clean;
    bytes[2] = 'X';
    spit_bytes(path, bytes);
    REQUIRE_THROWS_MATCHES(load_feature_bank(path), parse_error, MessageMatches(ContainsSubstring("bad magic")));
  }
  SECTION("unsupported version") {
    auto bytes = clean;
    bytes[4] = 9;
    spit_bytes(path, bytes);
    REQUIRE_THROWS_MATCHES(load_feature_bank(path), parse_error, MessageMatches(ContainsSubstring("version")));
  }
  SECTION("row count / payload mismatch") {
    auto bytes = clean;
    bytes[8] = 7;  // claims 7 rows, file sized for 5
    spit_bytes(path, bytes);
    REQUIRE_THROWS_MATCHES(load_feature_bank(path), parse_error, MessageMatches(ContainsSubstring("header implies")));
  }
  SECTION("truncated file") {
    auto bytes = clean;
    bytes.resize(bytes.size() - 9);
    spit_bytes(path, bytes);
    REQUIRE_THROWS_AS(load_feature_bank(path), parse_error);
  }
  SECTION("trailing garbage") {
    auto bytes = clean;
    bytes.push_back('\0');
    spit_bytes(path, bytes);
    REQUIRE_THROWS_AS(load_feature_bank(path), parse_error);
  }
  SECTION("negative label") {
    auto bytes = clean;
    bytes[16 + 3] = (char)0xFF;  // first label's high byte
    spit_bytes(path, bytes);
    REQUIRE_THROWS_MATCHES(load_feature_bank(path), parse_error, MessageMatches(ContainsSubstring("negative label")));
  }
  SECTION("denormalized feature row") {
    auto bytes = clean;
    std::fill(bytes.begin() + 36, bytes.begin() + 48, (char)0);  // zero out row 0
    spit_bytes(path, bytes);
    REQUIRE_THROWS_MATCHES(load_feature_bank(path), parse_error,
                           MessageMatches(ContainsSubstring("failed validation")));
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_feature_bank(tmp.path + "/nope.bcfb"), io_error);
  }
}

TEST_CASE("linear probe separates a margin-0.5 bank") {
  // Class 0 near +e1, class 1 near -e1; margin far above 0.5.
  const int d = 4, per_class = 20;
  auto make = [&](uint64_t seed) {
    FeatureBank fb;
    fb.features = Tensor<float>({2 * per_class, d});
    Rng rng(seed);
    for (int i = 0; i < 2 * per_class; ++i) {
      const int cls = i < per_class ? 0 : 1;
      double v[4];
      v[0] = cls == 0 ? 1.0 : -1.0;
      v[1] = 0.2 * rng.normal();
      v[2] = 0.2 * rng.normal();
      v[3] = 0.2 * rng.normal();
      const double inv = 1.0 / std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]);
      for (int j = 0; j < d; ++j) fb.features.data[(size_t)(i * d + j)] = (float)(v[j] * inv);
      fb.labels.push_back(cls);
    }
    return fb;
  };
  auto train = make(41);
  auto val = make(42);

  // Perceptron-convergence oracle: the data really is linearly separable.
  {
    std::vector<double> w((size_t)d, 0.0);
    double b = 0;
    bool converged = false;
    for (int pass = 0; pass < 100 && !converged; ++pass) {
      converged = true;
      for (int i = 0; i < train.n(); ++i) {
        const float* x = train.features.ptr() + (size_t)i * d;
        double s = b;
        for (int j = 0; j < d; ++j) s += w[(size_t)j] * x[j];
        const int y = train.labels[(size_t)i] == 0 ? 1 : -1;
        if (y * s <= 0) {
          for (int j = 0; j < d; ++j) w[(size_t)j] += y * x[j];
          b += y;
          converged = false;
        }
      }
    }
    REQUIRE(converged);
  }

  ProbeOptions opt;
  opt.batch_size = 16;
  auto res = linear_probe(train, val, 2, opt);
  REQUIRE(res.weight.shape == std::vector<int>({2, 4}));
  REQUIRE(res.train_accuracy >= 0.99);
  REQUIRE(res.val_accuracy >= 0.99);

  SECTION("probe training is deterministic") {
    auto res2 = linear_probe(train, val, 2, opt);
    REQUIRE(bitwise_equal(res.weight, res2.weight));
    REQUIRE(bitwise_equal(res.bias, res2.bias));
  }
  SECTION("lr = 0 leaves the zero classifier and its constant prediction") {
    ProbeOptions frozen = opt;
    frozen.lr = 0.0;
    auto res0 = linear_probe(train, val, 2, frozen);
    for (float v : res0.weight.data) REQUIRE(v == 0.0f);
    for (float v : res0.bias.data) REQUIRE(v == 0.0f);
    // All-zero logits tie-break to class 0 everywhere.
    REQUIRE(res0.train_accuracy == Catch::Approx(0.5));
    REQUIRE(res0.val_accuracy == Catch::Approx(0.5));
  }
  SECTION("bad labels are rejected") {
    auto broken = train;
    broken.labels[0] = 5;
    REQUIRE_THROWS_AS(linear_probe(broken, val, 2, opt), config_error);
  }
}

TEST_CASE("model-input probe never touches the frozen backbone") {
  auto ds_train = mini_dataset(2, 8, 51);
  auto ds_val = mini_dataset(2, 4, 52);
  auto bb = build_backbone<float>(mini_backbone_cfg(), 6);

  std::vector<Tensor<float>> params_before;
  for (auto* p : bb.params.all()) params_before.push_back(p->value);
  std::vector<Tensor<float>> buffers_before;
  for (auto& [name, buf] : bb.buffers()) buffers_before.push_back(*buf);

  ProbeOptions opt;
  opt.epochs = 3;
  opt.batch_size = 8;
  auto res = linear_probe(bb, ds_train, ds_val, 2, opt);
  REQUIRE(res.weight.shape == std::vector<int>({2, 64}));
  REQUIRE(res.train_accuracy >= 0.0);
  REQUIRE(res.val_accuracy <= 1.0);

  auto params_after = bb.params.all();
  for (size_t i = 0; i < params_after.size(); ++i) {
    INFO(params_after[i]->name);
    REQUIRE(bitwise_equal(params_after[i]->value, params_before[i]));
    REQUIRE_FALSE(params_after[i]->grad_populated);
    for (float g : params_after[i]->grad.data) REQUIRE(g == 0.0f);
  }
  auto bufs = bb.buffers();
  for (size_t i = 0; i < bufs.size(); ++i) REQUIRE(bitwise_equal(*bufs[i].second, buffers_before[i]));
  REQUIRE_FALSE(bb.training);  // flag restored (was eval before)

  SECTION("augmented probing is deterministic") {
    auto res2 = linear_probe(bb, ds_train, ds_val, 2, opt);
    REQUIRE(bitwise_equal(res.weight, res2.weight));
  }
}

TEST_CASE("k-NN monitor logs teacher-side accuracy without disturbing training") {
  TmpDir tmp("monitor");
  auto ds_train = mini_dataset(2, 6, 61);  // N = 12
  auto ds_val = mini_dataset(2, 3, 62);    // N = 6
  AugmentPolicy pol;
  pol.local_count = 2;
  auto rec = default_recipe(12, 3, 4);  // 4 epochs x 3 steps

  KnnMonitorConfig mc;
  mc.knn.k = 5;
  mc.csv_path = tmp.path + "/knn.csv";
  std::vector<double> accs;
  auto monitor = make_knn_monitor<float>(ds_train, ds_val, 2, mc, &accs);

  auto st = init_train_state<float>(mini_backbone_cfg(), [] {
    DinoHeadConfig hc;
    hc.in_dim = 64;
    hc.hidden_dim = 32;
    hc.bottleneck_dim = 8;
    hc.out_dim = 16;
    return hc;
  }(), 71);

  TrainRunOptions opt;
  opt.epochs = 4;
  opt.batch_size = 4;
  opt.monitor_every = 2;
  opt.out_dir = tmp.path + "/run_monitored";
  train_run(st, ds_train, pol, rec, opt, monitor);

  REQUIRE(accs.size() == 2);  // epochs 2 and 4
  for (double a : accs) {
    REQUIRE(a >= 0.0);
    REQUIRE(a <= 1.0);
  }
  auto lines = read_lines(mc.csv_path);
  REQUIRE(lines.size() == 3);
  REQUIRE(lines[0] == kKnnMonitorHeader);
  REQUIRE(lines[1].rfind("2,", 0) == 0);
  REQUIRE(lines[2].rfind("4,", 0) == 0);
  REQUIRE_THAT(lines[1], ContainsSubstring(",5,"));  // k column

  SECTION("monitoring leaves the trajectory bit-identical") {
    auto st2 = init_train_state<float>(mini_backbone_cfg(), st.student.head.cfg, 71);
    TrainRunOptions plain = opt;
    plain.out_dir = tmp.path + "/run_plain";
    train_run(st2, ds_train, pol, rec, plain);  // no monitor
    REQUIRE(slurp_bytes(opt.out_dir + "/checkpoint_final.bcsl") ==
            slurp_bytes(plain.out_dir + "/checkpoint_final.bcsl"));
  }
  SECTION("the monitor reads the teacher, not the student") {
    accs.clear();
    monitor(st, 99);
    Rng rng(123);
    for (auto* p : st.student.all_params())
      for (auto& v : p->value.data) v += (float)rng.normal();
    monitor(st, 100);
    REQUIRE(accs.size() == 2);
    REQUIRE(accs[0] == accs[1]);
  }
  SECTION("a failing monitor logs and lets the run finish") {
    KnnMonitorConfig broken = mc;
    broken.knn.k = 500;  // > bank size: config_error inside the hook
    broken.csv_path = tmp.path + "/broken.csv";
    std::vector<double> broken_accs;
    auto bad_monitor = make_knn_monitor<float>(ds_train, ds_val, 2, broken, &broken_accs);
    auto st3 = init_train_state<float>(mini_backbone_cfg(), st.student.head.cfg, 72);
    TrainRunOptions o2 = opt;
    o2.out_dir = tmp.path + "/run_broken";
    REQUIRE_NOTHROW(train_run(st3, ds_train, pol, rec, o2, bad_monitor));
    REQUIRE(st3.epoch == 4);
    REQUIRE(broken_accs.empty());
    REQUIRE_FALSE(std::filesystem::exists(broken.csv_path));
  }
}
