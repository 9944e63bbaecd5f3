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
#include <fstream>
#include <functional>
#include <numeric>

#include "bcssl/dataset.hpp"
#include "bcssl/dino.hpp"

// Representation-quality protocols: frozen-feature extraction, weighted k-NN
// classification, a linear probe on the frozen backbone, and the periodic
// k-NN monitor hook for the training loop. Everything here is read-only on
// the model.

namespace bcssl {

// ---------------------------------------------------------------------------
// Feature bank
// ---------------------------------------------------------------------------

// L2-normalized embeddings with labels. `model_hash`/`data_hash` fingerprint
// what produced the bank so stale files are detectable downstream.
struct FeatureBank {
  Tensor<float> features;  // [N, D], every row unit-norm
  std::vector<int> labels;
  uint64_t model_hash = 0;
  uint64_t data_hash = 0;

  int n() const { return features.numel() ? features.dim(0) : 0; }
  int dim() const { return features.numel() ? features.dim(1) : 0; }

  void validate() const {
    if (features.ndim() != 2 || features.dim(0) < 1 || features.dim(1) < 1) {
      throw shape_error("feature bank must be a non-empty [N, D] matrix");
    }
    if ((int)labels.size() != features.dim(0)) {
      throw shape_error(detail::strf("feature bank has %d rows but %zu labels", features.dim(0), labels.size()));
    }
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0) throw config_error(detail::strf("feature bank label %zu is negative", i));
    }
    const int d = features.dim(1);
    for (int r = 0; r < features.dim(0); ++r) {
      double sq = 0;
      const float* row = features.ptr() + (size_t)r * d;
      for (int j = 0; j < d; ++j) sq += (double)row[j] * row[j];
      const double norm = std::sqrt(sq);
      if (std::abs(norm - 1.0) > 1e-5) {
        throw config_error(detail::strf("feature bank row %d has norm %.8g, expected 1", r, norm));
      }
    }
  }
};

// Content fingerprint of a dataset (shape header, labels, pixels).
inline uint64_t dataset_hash(const Dataset& ds) {
  const uint32_t hdr[5] = {(uint32_t)ds.n, (uint32_t)ds.height, (uint32_t)ds.width, (uint32_t)ds.num_classes, 3u};
  uint64_t h = fnv1a(hdr, sizeof(hdr));
  h = fnv1a(ds.labels.data(), ds.labels.size() * sizeof(uint8_t), h);
  return fnv1a(ds.pixels.data(), ds.pixels.size(), h);
}

// Content fingerprint of a backbone: config plus the raw bytes of every
// parameter and buffer, in registration order.
template <typename S>
uint64_t backbone_hash(Backbone<S>& bb) {
  const auto& c = bb.cfg;
  const std::string cfg = detail::strf("%s|%d,%d,%d,%d|%d,%d,%d,%d|k%d|bn%d|p%d", c.variant.c_str(), c.depths[0],
                                       c.depths[1], c.depths[2], c.depths[3], c.dims[0], c.dims[1], c.dims[2],
                                       c.dims[3], c.kernel_size, (int)c.use_bn_after_dw, c.stem_patch);
  uint64_t h = fnv1a(cfg);
  for (auto* p : bb.params.all()) {
    h = fnv1a(p->name.data(), p->name.size(), h);
    h = fnv1a(p->value.ptr(), (size_t)p->value.numel() * sizeof(S), h);
  }
  for (auto& [name, buf] : bb.buffers()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(buf->ptr(), (size_t)buf->numel() * sizeof(S), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

struct ExtractOptions {
  int resolution = 64;  // center crop/resize target; must be divisible by the backbone reduction
  int batch_size = 32;
  AugmentPolicy policy;  // only the normalization constants are used
};

namespace detail {

// Restores the backbone's train/eval flag on scope exit, so extraction can
// never leave a live training state flipped into eval mode.
template <typename S>
struct EvalModeGuard {
  Backbone<S>& bb;
  bool saved;
  explicit EvalModeGuard(Backbone<S>& b) : bb(b), saved(b.training) { bb.training = false; }
  ~EvalModeGuard() { bb.training = saved; }
};

template <typename S>
void l2_normalize_rows(const Tensor<S>& in, float* out, int rows, int dim) {
  for (int r = 0; r < rows; ++r) {
    const S* src = in.ptr() + (size_t)r * dim;
    double sq = 0;
    for (int j = 0; j < dim; ++j) sq += (double)src[j] * src[j];
    const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
    for (int j = 0; j < dim; ++j) out[(size_t)r * dim + j] = (float)(src[j] * inv);
  }
}

}  // namespace detail

// Deterministic eval-mode embeddings of every image: center view (no
// augmentation), pooled backbone features, L2-normalized rows. Batch size
// does not affect the result; it only bounds peak memory.
template <typename S>
FeatureBank extract_features(Backbone<S>& bb, const Dataset& ds, const ExtractOptions& opt = {}) {
  ds.validate();
  opt.policy.validate();
  if (opt.batch_size < 1) throw config_error("extract_features: batch_size must be >= 1");
  const int red = bb.cfg.reduction();
  if (opt.resolution < red || opt.resolution % red != 0) {
    throw config_error(detail::strf("extract_features: resolution %d is not a positive multiple of the backbone "
                                    "reduction %d",
                                    opt.resolution, red));
  }

  detail::EvalModeGuard<S> guard(bb);
  const int d = bb.cfg.feature_dim();
  FeatureBank fb;
  fb.features = Tensor<float>({(int)ds.n, d});
  fb.labels.assign(ds.labels.begin(), ds.labels.end());
  fb.data_hash = dataset_hash(ds);

  for (int64_t start = 0; start < ds.n; start += opt.batch_size) {
    const int b = (int)std::min<int64_t>(opt.batch_size, ds.n - start);
    Tensor<S> stack({b, 3, opt.resolution, opt.resolution});
    const int64_t stride = (int64_t)3 * opt.resolution * opt.resolution;
    for (int i = 0; i < b; ++i) {
      Tensor<float> view = center_view(ds.image(start + i), opt.resolution, opt.policy);
      for (int64_t j = 0; j < stride; ++j) stack.data[(size_t)(i * stride + j)] = (S)view.data[(size_t)j];
    }
    Tape<S> t(false);
    const Tensor<S>& pooled = t.val(forward_pooled(bb, t, t.constant(std::move(stack))));
    detail::l2_normalize_rows(pooled, fb.features.ptr() + (size_t)start * d, b, d);
  }
  fb.model_hash = backbone_hash(bb);
  return fb;
}

// ---------------------------------------------------------------------------
// Weighted k-NN
// ---------------------------------------------------------------------------

struct KnnOptions {
  int k = 20;
  double tau = 0.07;     // similarity temperature for the vote weights
  bool weighted = true;  // exp(sim/tau) weights; false = plain majority vote
};

// Cosine-similarity k-NN over a bank of unit-norm rows. Class score is the
// sum of exp(sim/tau) over that class's neighbors (or a plain count when
// unweighted); score ties go to the smallest class index. Neighbor selection
// orders by similarity, then by bank index, so duplicated rows cannot make
// the result depend on sort internals.
inline std::vector<int> knn_classify(const FeatureBank& bank, const Tensor<float>& queries, int num_classes,
                                     const KnnOptions& opt = {}) {
  bank.validate();
  if (num_classes < 1) throw config_error("knn_classify: num_classes must be >= 1");
  if (queries.ndim() != 2 || queries.dim(1) != bank.dim()) {
    throw shape_error(detail::strf("knn_classify: queries must be [M, %d]", bank.dim()));
  }
  const int n = bank.n(), d = bank.dim(), m = queries.dim(0);
  if (opt.k < 1 || opt.k > n) {
    throw config_error(detail::strf("knn_classify: k=%d outside [1, %d]", opt.k, n));
  }
  if (!(opt.tau > 0)) throw config_error("knn_classify: tau must be positive");
  for (int i = 0; i < n; ++i) {
    if (bank.labels[(size_t)i] >= num_classes) {
      throw config_error(detail::strf("knn_classify: bank label %d >= num_classes %d", bank.labels[(size_t)i],
                                      num_classes));
    }
  }

  std::vector<int> out((size_t)m);
  std::vector<double> sims((size_t)n);
  std::vector<int> order((size_t)n);
  std::vector<double> score((size_t)num_classes);
  for (int q = 0; q < m; ++q) {
    const float* qv = queries.ptr() + (size_t)q * d;
    for (int i = 0; i < n; ++i) {
      const float* row = bank.features.ptr() + (size_t)i * d;
      double s = 0;
      for (int j = 0; j < d; ++j) s += (double)row[j] * qv[j];
      sims[(size_t)i] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + opt.k, order.end(), [&](int a, int b) {
      if (sims[(size_t)a] != sims[(size_t)b]) return sims[(size_t)a] > sims[(size_t)b];
      return a < b;
    });
    std::fill(score.begin(), score.end(), 0.0);
    for (int r = 0; r < opt.k; ++r) {
      const int i = order[(size_t)r];
      score[(size_t)bank.labels[(size_t)i]] += opt.weighted ? std::exp(sims[(size_t)i] / opt.tau) : 1.0;
    }
    int best = 0;
    for (int c = 1; c < num_classes; ++c) {
      if (score[(size_t)c] > score[(size_t)best]) best = c;
    }
    out[(size_t)q] = best;
  }
  return out;
}

// Top-1 accuracy of the bank's k-NN vote on a labeled query bank.
inline double knn_accuracy(const FeatureBank& bank, const FeatureBank& queries, int num_classes,
                           const KnnOptions& opt = {}) {
  queries.validate();
  auto pred = knn_classify(bank, queries.features, num_classes, opt);
  int hits = 0;
  for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == queries.labels[i];
  return (double)hits / (double)pred.size();
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeOptions {
  int epochs = 100;
  double lr = 0.001;
  double momentum = 0.9;
  int batch_size = 64;
  uint64_t seed = 0;
  int resolution = 64;   // model-input mode only
  AugmentPolicy policy;  // model-input mode: crop scale range + normalization
};

struct ProbeResult {
  Tensor<float> weight;  // [C, D]
  Tensor<float> bias;    // [C]
  double train_accuracy = 0;
  double val_accuracy = 0;
};

namespace detail {

inline std::vector<int> probe_predict(const Tensor<float>& w, const Tensor<float>& b, const Tensor<float>& feats) {
  const int n = feats.dim(0), d = feats.dim(1), c = w.dim(0);
  std::vector<int> out((size_t)n);
  for (int r = 0; r < n; ++r) {
    const float* x = feats.ptr() + (size_t)r * d;
    int best = 0;
    double best_v = -1e300;
    for (int ci = 0; ci < c; ++ci) {
      const float* wr = w.ptr() + (size_t)ci * d;
      double v = b.data[(size_t)ci];
      for (int j = 0; j < d; ++j) v += (double)wr[j] * x[j];
      if (v > best_v) {
        best_v = v;
        best = ci;
      }
    }
    out[(size_t)r] = best;
  }
  return out;
}

inline double accuracy_of(const std::vector<int>& pred, const std::vector<int>& truth) {
  int hits = 0;
  for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
  return pred.empty() ? 0.0 : (double)hits / (double)pred.size();
}

// Shared probe trainer: one linear layer (zero-initialized), softmax cross
// entropy, SGD with momentum and cosine lr decay to zero. `batch_features`
// yields the [B, D] float feature matrix for the given sample indices of one
// epoch.
inline ProbeResult train_probe_on(
    const std::function<Tensor<float>(const std::vector<int>&, int64_t epoch)>& batch_features,
    const std::vector<int>& labels, int n, int dim, int num_classes, const ProbeOptions& opt) {
  if (opt.epochs < 1) throw config_error("linear_probe: epochs must be >= 1");
  if (opt.batch_size < 1) throw config_error("linear_probe: batch_size must be >= 1");
  if (num_classes < 1) throw config_error("linear_probe: num_classes must be >= 1");
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw config_error("linear_probe: label outside [0, num_classes)");
  }

  ParamSet<float> ps;
  Parameter<float>& w = ps.create("probe.weight", {num_classes, dim});
  Parameter<float>& b = ps.create("probe.bias", {num_classes});
  auto params = ps.all();

  const int64_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const Schedule lr = Schedule::cosine(opt.lr, 0.0, opt.epochs * steps_per_epoch);
  const uint64_t order_tag = fnv1a("probe-order");

  int64_t step = 0;
  std::vector<int> order((size_t)n);
  for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(Rng::key_of({opt.seed, order_tag, (uint64_t)epoch}));
    shuffle_rng.shuffle(order);
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      const size_t lo = (size_t)(s * opt.batch_size);
      const size_t hi = std::min<size_t>(lo + (size_t)opt.batch_size, (size_t)n);
      std::vector<int> idx(order.begin() + (int64_t)lo, order.begin() + (int64_t)hi);
      std::vector<int> y;
      y.reserve(idx.size());
      for (int i : idx) y.push_back(labels[(size_t)i]);

      ps.zero_grads();
      Tape<float> t(true);
      int logits = ag::linear(t, t.constant(batch_features(idx, epoch)), t.param(w), t.param(b));
      int loss = ag::nll_loss(t, ag::log_softmax(t, logits, 1.0f), y);
      t.backward(loss);
      sgd_step(params, lr.value(step), opt.momentum);
      ++step;
    }
  }
  ProbeResult res;
  res.weight = w.value;
  res.bias = b.value;
  return res;
}

}  // namespace detail

// Probe on precomputed banks (no augmentation). Trains on `train`, reports
// top-1 on both banks.
inline ProbeResult linear_probe(const FeatureBank& train, const FeatureBank& val, int num_classes,
                                const ProbeOptions& opt = {}) {
  train.validate();
  val.validate();
  if (val.dim() != train.dim()) throw shape_error("linear_probe: train/val feature dims differ");
  const int d = train.dim();
  auto batch_features = [&](const std::vector<int>& idx, int64_t) {
    Tensor<float> x({(int)idx.size(), d});
    for (size_t r = 0; r < idx.size(); ++r) {
      const float* src = train.features.ptr() + (size_t)idx[r] * d;
      std::copy(src, src + d, x.ptr() + r * (size_t)d);
    }
    return x;
  };
  ProbeResult res = detail::train_probe_on(batch_features, train.labels, train.n(), d, num_classes, opt);
  res.train_accuracy = detail::accuracy_of(detail::probe_predict(res.weight, res.bias, train.features), train.labels);
  res.val_accuracy = detail::accuracy_of(detail::probe_predict(res.weight, res.bias, val.features), val.labels);
  return res;
}

// Probe on a frozen backbone with crop+flip augmentation: every epoch re-
// extracts features from a fresh random resized crop (global scale range) and
// coin-flip mirror of each training image. The backbone sees no gradients at
// any point. Accuracy is reported on un-augmented center views.
template <typename S>
ProbeResult linear_probe(Backbone<S>& frozen, const Dataset& train, const Dataset& val, int num_classes,
                         const ProbeOptions& opt = {}) {
  train.validate();
  val.validate();
  opt.policy.validate();
  const int red = frozen.cfg.reduction();
  if (opt.resolution < red || opt.resolution % red != 0) {
    throw config_error(detail::strf("linear_probe: resolution %d is not a positive multiple of the backbone "
                                    "reduction %d",
                                    opt.resolution, red));
  }
  detail::EvalModeGuard<S> guard(frozen);
  const int d = frozen.cfg.feature_dim();
  const uint64_t aug_tag = fnv1a("probe-aug");
  const auto& pol = opt.policy;

  auto batch_features = [&](const std::vector<int>& idx, int64_t epoch) {
    const int b = (int)idx.size();
    Tensor<S> stack({b, 3, opt.resolution, opt.resolution});
    const int64_t stride = (int64_t)3 * opt.resolution * opt.resolution;
    for (int i = 0; i < b; ++i) {
      const Tensor<float> img = train.image(idx[(size_t)i]);
      Rng rng(Rng::key_of({opt.seed, aug_tag, (uint64_t)epoch, (uint64_t)idx[(size_t)i]}));
      const CropRegion cr = sample_resized_crop(img.shape[1], img.shape[2], pol.global_scale_lo, pol.global_scale_hi,
                                                pol.aspect_lo, pol.aspect_hi, rng);
      Tensor<float> view = resize_bicubic(crop(img, cr.y0, cr.x0, cr.h, cr.w), opt.resolution, opt.resolution);
      clamp01_inplace(view);
      if (rng.bernoulli(0.5)) view = hflip(view);
      normalize_inplace(view, pol.norm_mean, pol.norm_std);
      for (int64_t j = 0; j < stride; ++j) stack.data[(size_t)(i * stride + j)] = (S)view.data[(size_t)j];
    }
    Tape<S> t(false);
    const Tensor<S>& pooled = t.val(forward_pooled(frozen, t, t.constant(std::move(stack))));
    Tensor<float> out({b, d});
    detail::l2_normalize_rows(pooled, out.ptr(), b, d);
    return out;
  };

  std::vector<int> labels(train.labels.begin(), train.labels.end());
  ProbeResult res = detail::train_probe_on(batch_features, labels, (int)train.n, d, num_classes, opt);

  ExtractOptions ex;
  ex.resolution = opt.resolution;
  ex.policy = opt.policy;
  const FeatureBank train_bank = extract_features(frozen, train, ex);
  const FeatureBank val_bank = extract_features(frozen, val, ex);
  res.train_accuracy =
      detail::accuracy_of(detail::probe_predict(res.weight, res.bias, train_bank.features), train_bank.labels);
  res.val_accuracy =
      detail::accuracy_of(detail::probe_predict(res.weight, res.bias, val_bank.features), val_bank.labels);
  return res;
}

// ---------------------------------------------------------------------------
// k-NN training monitor
// ---------------------------------------------------------------------------

inline constexpr const char* kKnnMonitorHeader = "epoch,knn_top1,k,tau";

struct KnnMonitorConfig {
  ExtractOptions extract;
  KnnOptions knn;
  std::string csv_path = "knn_monitor.csv";
};

// Builds a train_run monitor hook: extracts *teacher* features for the train
// and validation sets, scores weighted k-NN, and appends one CSV row. The
// hook never mutates the training state, and a failure inside it is logged
// to stderr rather than aborting the run. The returned callable borrows both
// datasets; keep them alive for the duration of the run.
template <typename S>
std::function<void(TrainState<S>&, int)> make_knn_monitor(const Dataset& train, const Dataset& val, int num_classes,
                                                          const KnnMonitorConfig& cfg,
                                                          std::vector<double>* out_accuracies = nullptr) {
  return [&train, &val, num_classes, cfg, out_accuracies](TrainState<S>& st, int epoch) {
    try {
      const FeatureBank bank = extract_features(st.teacher.backbone, train, cfg.extract);
      const FeatureBank queries = extract_features(st.teacher.backbone, val, cfg.extract);
      const double acc = knn_accuracy(bank, queries, num_classes, cfg.knn);
      if (out_accuracies) out_accuracies->push_back(acc);
      const bool fresh = !std::filesystem::exists(cfg.csv_path) || std::filesystem::file_size(cfg.csv_path) == 0;
      std::ofstream log(cfg.csv_path, std::ios::app);
      if (!log) throw io_error("cannot open monitor log '" + cfg.csv_path + "'");
      if (fresh) log << kKnnMonitorHeader << "\n";
      log << detail::strf("%d,%.10g,%d,%.10g", epoch, acc, cfg.knn.k, cfg.knn.tau) << "\n";
    } catch (const std::exception& e) {
      std::fprintf(stderr, "knn monitor failed at epoch %d: %s\n", epoch, e.what());
    }
  };
}

// ---------------------------------------------------------------------------
// Feature bank file format
// ---------------------------------------------------------------------------

inline constexpr char kBankMagic[4] = {'B', 'C', 'F', 'B'};
inline constexpr uint32_t kBankVersion = 1;

inline void save_feature_bank(const FeatureBank& fb, const std::string& path) {
  fb.validate();
  BinaryWriter w(path);
  w.write_magic(kBankMagic);
  w.write_u32(kBankVersion);
  w.write_u32((uint32_t)fb.n());
  w.write_u32((uint32_t)fb.dim());
  for (int l : fb.labels) w.write_u32((uint32_t)l);
  w.write_bytes(fb.features.ptr(), (uint64_t)fb.features.numel() * 4);
  w.write_u64(fb.model_hash);
  w.write_u64(fb.data_hash);
  w.close();
}

inline FeatureBank load_feature_bank(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kBankMagic);
  uint64_t at = r.offset();
  const uint32_t version = r.read_u32("version");
  if (version != kBankVersion) {
    throw parse_error(detail::strf("unsupported feature bank version %u (expected %u)", version, kBankVersion), at);
  }
  at = r.offset();
  const uint32_t n = r.read_u32("row count");
  const uint32_t d = r.read_u32("feature dim");
  if (n < 1 || d < 1) throw parse_error("feature bank must be non-empty", at);
  const uint64_t need = (uint64_t)n * 4 + (uint64_t)n * d * 4 + 16;
  if (r.remaining() != need) {
    throw parse_error(detail::strf("bank records: header implies %llu bytes, file holds %llu",
                                   (unsigned long long)need, (unsigned long long)r.remaining()),
                      r.offset());
  }
  FeatureBank fb;
  fb.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    at = r.offset();
    const int32_t l = (int32_t)r.read_u32("label");
    if (l < 0) throw parse_error(detail::strf("negative label %d at row %u", l, i), at);
    fb.labels[(size_t)i] = l;
  }
  fb.features = Tensor<float>({(int)n, (int)d});
  at = r.offset();
  r.read_bytes(fb.features.ptr(), (uint64_t)n * d * 4, "feature rows");
  fb.model_hash = r.read_u64("model hash");
  fb.data_hash = r.read_u64("data hash");
  r.expect_eof();
  try {
    fb.validate();
  } catch (const std::exception& e) {
    throw parse_error(std::string("feature rows failed validation: ") + e.what(), at);
  }
  return fb;
}

}  // namespace bcssl
