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

#include "bcssl/augment.hpp"
#include "bcssl/backbone.hpp"
#include "bcssl/optim.hpp"
#include "bcssl/schedules.hpp"

// Self-distillation trainer: projection head, centered/sharpened cross-view
// loss, teacher EMA, schedules, and the step/run loop. The student sees every
// view of each image; an exponential-moving-average teacher sees only the two
// global views and provides the (gradient-isolated) targets.

namespace bcssl {

// ---------------------------------------------------------------------------
// Projection head
// ---------------------------------------------------------------------------

struct DinoHeadConfig {
  int in_dim = 256;          // backbone pooled dim
  int hidden_dim = 512;
  int bottleneck_dim = 64;
  int out_dim = 1024;        // number of prototypes K
  bool trainable_last_gain = true;

  void validate() const {
    if (in_dim < 1 || hidden_dim < 1 || bottleneck_dim < 1 || out_dim < 1) {
      throw config_error("projection head dims must all be >= 1");
    }
  }
};

// 3-layer MLP to a bottleneck, L2 normalization, then a weight-normalized
// prototype projection. Deliberately no normalization layer after the final
// projection. The prototype gains can be frozen at 1 via the config flag.
template <typename S>
struct DinoHead {
  DinoHeadConfig cfg;
  ParamSet<S> params;
  Parameter<S>*w1, *b1, *w2, *b2, *w3, *b3;
  Parameter<S>*last_dir, *last_gain;
};

template <typename S>
DinoHead<S> build_dino_head(const DinoHeadConfig& cfg, uint64_t seed) {
  cfg.validate();
  DinoHead<S> head;
  head.cfg = cfg;
  auto& ps = head.params;
  auto make_linear = [&](const char* name, int dout, int din, Parameter<S>** w, Parameter<S>** b) {
    *w = &ps.create(std::string("head.") + name + ".weight", {dout, din});
    ParamSet<S>::init_trunc_normal(**w, seed);
    *b = &ps.create(std::string("head.") + name + ".bias", {dout});
  };
  make_linear("mlp1", cfg.hidden_dim, cfg.in_dim, &head.w1, &head.b1);
  make_linear("mlp2", cfg.hidden_dim, cfg.hidden_dim, &head.w2, &head.b2);
  make_linear("mlp3", cfg.bottleneck_dim, cfg.hidden_dim, &head.w3, &head.b3);
  head.last_dir = &ps.create("head.last.dir", {cfg.out_dim, cfg.bottleneck_dim});
  ParamSet<S>::init_trunc_normal(*head.last_dir, seed);
  head.last_gain = &ps.create("head.last.gain", {cfg.out_dim});
  std::fill(head.last_gain->value.data.begin(), head.last_gain->value.data.end(), S(1));
  head.last_gain->trainable = cfg.trainable_last_gain;
  return head;
}

template <typename S>
DinoHead<S> clone_dino_head(const DinoHead<S>& src) {
  DinoHead<S> dst = build_dino_head<S>(src.cfg, 0);
  auto sp = src.params.all();
  auto dp = dst.params.all();
  for (size_t i = 0; i < sp.size(); ++i) {
    dp[i]->value = sp[i]->value;
    dp[i]->trainable = sp[i]->trainable;
  }
  return dst;
}

// pooled [N, in_dim] -> prototype logits [N, K].
template <typename S>
int head_forward(DinoHead<S>& head, Tape<S>& t, int pooled) {
  int h = ag::linear(t, pooled, t.param(*head.w1), t.param(*head.b1));
  h = ag::gelu(t, h);
  h = ag::linear(t, h, t.param(*head.w2), t.param(*head.b2));
  h = ag::gelu(t, h);
  h = ag::linear(t, h, t.param(*head.w3), t.param(*head.b3));
  h = ag::l2_normalize(t, h, (S)1e-12);
  return ag::weight_norm_linear(t, h, t.param(*head.last_dir), t.param(*head.last_gain));
}

// ---------------------------------------------------------------------------
// Full model (backbone + head)
// ---------------------------------------------------------------------------

template <typename S>
struct SslModel {
  Backbone<S> backbone;
  DinoHead<S> head;

  std::vector<Parameter<S>*> all_params() {
    auto out = backbone.params.all();
    for (auto* p : head.params.all()) out.push_back(p);
    return out;
  }
  void zero_grads() {
    backbone.params.zero_grads();
    head.params.zero_grads();
  }
};

template <typename S>
SslModel<S> build_ssl_model(const BackboneConfig& bc, const DinoHeadConfig& hc, uint64_t seed) {
  if (hc.in_dim != bc.feature_dim()) {
    throw config_error("projection head in_dim " + std::to_string(hc.in_dim) + " != backbone feature dim " +
                       std::to_string(bc.feature_dim()));
  }
  SslModel<S> m;
  m.backbone = build_backbone<S>(bc, seed);
  m.head = build_dino_head<S>(hc, Rng::key_of(seed, "head"));
  return m;
}

template <typename S>
SslModel<S> clone_ssl_model(SslModel<S>& src) {
  SslModel<S> dst;
  dst.backbone = clone_backbone(src.backbone);
  dst.head = clone_dino_head(src.head);
  return dst;
}

// images node [N,3,H,W] -> prototype logits node [N,K].
template <typename S>
int model_forward(SslModel<S>& m, Tape<S>& t, int images, Rng* droppath_rng = nullptr) {
  return head_forward(m.head, t, forward_pooled(m.backbone, t, images, droppath_rng));
}

// ---------------------------------------------------------------------------
// Loss, centering, EMA
// ---------------------------------------------------------------------------

template <typename S>
struct DinoLossResult {
  int loss = -1;                 // scalar node on the tape
  Tensor<S> teacher_batch_mean;  // [K] mean of raw teacher logits (for centering)
};

// Cross-view distillation loss. Teacher logits enter as plain tensors: the
// teacher path is gradient-isolated by construction. Student views must be
// ordered [global1, global2, locals...] so that view i is excluded from
// teacher view i's pairs. The loss is the mean over the 2*(V-1) ordered
// (teacher view, student view) pairs of
//   CE(softmax((teacher - center)/tau_t), log_softmax(student/tau_s)).
template <typename S>
DinoLossResult<S> dino_loss(Tape<S>& t, const std::vector<int>& student_views,
                            const std::vector<Tensor<S>>& teacher_views, const Tensor<S>& center, double tau_s,
                            double tau_t) {
  if (teacher_views.size() != 2) throw shape_error("dino_loss: expected exactly 2 teacher views");
  if (student_views.size() < 2) throw shape_error("dino_loss: expected at least 2 student views");
  if (!(tau_s > 0) || !(tau_t > 0)) throw config_error("dino_loss: temperatures must be positive");
  const auto shape = t.shape(student_views[0]);
  if (shape.size() != 2) throw shape_error("dino_loss: views must be [N, K] logits");
  const int n = shape[0], k = shape[1];
  if (center.numel() != k) throw shape_error("dino_loss: center length != K");
  for (int sv : student_views) {
    if (t.shape(sv) != shape) throw shape_error("dino_loss: student views disagree on shape");
  }

  DinoLossResult<S> out;
  out.teacher_batch_mean = Tensor<S>({k});
  std::vector<int> teacher_prob_nodes;
  for (const auto& tv : teacher_views) {
    if (tv.shape != shape) throw shape_error("dino_loss: teacher views must match student view shapes");
    Tensor<S> centered(tv.shape);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < k; ++c) {
        const S raw = tv.data[(size_t)r * k + c];
        centered.data[(size_t)r * k + c] = raw - center.data[(size_t)c];
        out.teacher_batch_mean.data[(size_t)c] += raw;
      }
    }
    teacher_prob_nodes.push_back(t.constant(ops::softmax(centered, (S)tau_t)));
  }
  for (auto& v : out.teacher_batch_mean.data) v /= (S)(2 * n);

  std::vector<int> student_logp;
  student_logp.reserve(student_views.size());
  for (int sv : student_views) student_logp.push_back(ag::log_softmax(t, sv, (S)tau_s));

  int acc = -1, pairs = 0;
  for (int ti = 0; ti < 2; ++ti) {
    for (size_t sv = 0; sv < student_views.size(); ++sv) {
      if ((int)sv == ti) continue;
      int ce = ag::cross_entropy_with_probs(t, student_logp[sv], teacher_prob_nodes[(size_t)ti]);
      acc = acc < 0 ? ce : ag::add(t, acc, ce);
      ++pairs;
    }
  }
  out.loss = ag::scale(t, acc, (S)(1.0 / pairs));
  return out;
}

// center <- m*center + (1-m)*batch_mean.
template <typename S>
void update_center(Tensor<S>& center, const Tensor<S>& batch_mean, double momentum) {
  check_same_shape(center, batch_mean, "update_center");
  for (int64_t i = 0; i < center.numel(); ++i) {
    center.data[(size_t)i] = (S)(momentum * center.data[(size_t)i] + (1.0 - momentum) * batch_mean.data[(size_t)i]);
  }
}

// theta_t <- lambda*theta_t + (1-lambda)*theta_s for every parameter, plus a
// straight copy of the BN running stats. Requires identical name sets.
template <typename S>
void ema_update(SslModel<S>& teacher, SslModel<S>& student, double lambda) {
  auto tp = teacher.all_params();
  auto sp = student.all_params();
  if (tp.size() != sp.size()) throw config_error("ema_update: parameter sets differ in size");
  for (size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]->name != sp[i]->name) {
      throw config_error("ema_update: parameter name mismatch: " + tp[i]->name + " vs " + sp[i]->name);
    }
    if (tp[i]->value.shape != sp[i]->value.shape) {
      throw config_error("ema_update: shape mismatch for parameter " + tp[i]->name);
    }
    S* tv = tp[i]->value.ptr();
    const S* svp = sp[i]->value.ptr();
    const S lam = (S)lambda, one_m = (S)(1.0 - lambda);
    const int64_t m = tp[i]->value.numel();
    for (int64_t j = 0; j < m; ++j) tv[j] = lam * tv[j] + one_m * svp[j];
  }
  auto tb = teacher.backbone.buffers();
  auto sb = student.backbone.buffers();
  for (size_t i = 0; i < tb.size(); ++i) *tb[i].second = *sb[i].second;
}

// ---------------------------------------------------------------------------
// Recipe and train state
// ---------------------------------------------------------------------------

// lr = 0.0005 * batch / 256 (linear scaling rule).
inline double resolve_lr(int batch_size) {
  if (batch_size < 1) throw config_error("batch size must be >= 1");
  return 0.0005 * batch_size / 256.0;
}

struct TrainRecipe {
  Schedule lr;            // cosine with warmup
  Schedule wd;            // cosine 0.04 -> 0.4
  Schedule teacher_temp;  // linear 0.04 -> 0.07 over the first 30 epochs
  Schedule ema_lambda;    // cosine 0.996 -> 1.0
  double student_temp = 0.1;
  double center_momentum = 0.9;
  double clip_norm = 3.0;
  int freeze_last_epochs = 0;  // freeze prototype layer for the first N epochs
};

// Default schedules for a run of `total_steps` (= epochs * steps/epoch).
// Warmups are clamped so short runs stay well-formed.
inline TrainRecipe default_recipe(int64_t total_steps, int64_t steps_per_epoch, int batch_size) {
  if (total_steps < 1 || steps_per_epoch < 1) throw config_error("recipe needs at least one step");
  TrainRecipe r;
  r.lr = Schedule::cosine(resolve_lr(batch_size), 1e-6, total_steps,
                          std::min<int64_t>(10 * steps_per_epoch, total_steps));
  r.wd = Schedule::cosine(0.04, 0.4, total_steps);
  r.teacher_temp = Schedule::linear_then_const(0.04, 0.07, total_steps,
                                               std::min<int64_t>(30 * steps_per_epoch, total_steps));
  r.ema_lambda = Schedule::cosine(0.996, 1.0, total_steps);
  return r;
}

// Alternative flat teacher temperature preset. An order of magnitude above
// the scheduled range and in tension with the 0.04->0.07 ramp; shipped
// unmodified for completeness, not as the default.
inline Schedule flat_teacher_temp(int64_t total_steps) {
  return Schedule::linear_then_const(0.4, 0.4, total_steps, 0);
}

template <typename S>
struct TrainState {
  SslModel<S> student;
  SslModel<S> teacher;
  Tensor<S> center;  // [K]
  int64_t step = 0;
  int64_t epoch = 0;
  uint64_t seed = 0;
};

// Teacher starts as an exact copy of the student; it is EMA-only thereafter.
template <typename S>
TrainState<S> init_train_state(const BackboneConfig& bc, const DinoHeadConfig& hc, uint64_t seed) {
  TrainState<S> st;
  st.seed = seed;
  st.student = build_ssl_model<S>(bc, hc, seed);
  st.teacher = clone_ssl_model(st.student);
  for (auto* p : st.teacher.all_params()) p->trainable = false;
  st.student.backbone.training = true;
  st.teacher.backbone.training = false;
  st.center = Tensor<S>({hc.out_dim});
  return st;
}

// ---------------------------------------------------------------------------
// Training step and run loop
// ---------------------------------------------------------------------------

struct StepMetrics {
  int64_t step = 0;
  int64_t epoch = 0;
  double loss = 0, lr = 0, wd = 0, teacher_temp = 0, ema_lambda = 0, grad_norm = 0;
};

inline constexpr const char* kMetricsHeader = "step,epoch,loss,lr,wd,teacher_temp,ema_lambda,grad_norm";

inline std::string metrics_csv_row(const StepMetrics& m) {
  return detail::strf("%lld,%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", (long long)m.step, (long long)m.epoch, m.loss,
                      m.lr, m.wd, m.teacher_temp, m.ema_lambda, m.grad_norm);
}

namespace detail {

// Stacks one view slot across the batch into [B, 3, S, S].
template <typename S>
Tensor<S> stack_view(const std::vector<CropSet>& batch, bool global, int idx) {
  const Tensor<float>& first = global ? batch[0].global_views[(size_t)idx] : batch[0].local_views[(size_t)idx];
  Tensor<S> out({(int)batch.size(), first.shape[0], first.shape[1], first.shape[2]});
  const int64_t stride = first.numel();
  for (size_t b = 0; b < batch.size(); ++b) {
    const Tensor<float>& v = global ? batch[b].global_views[(size_t)idx] : batch[b].local_views[(size_t)idx];
    if (v.shape != first.shape) throw shape_error("train batch views disagree on shape");
    for (int64_t i = 0; i < stride; ++i) out.data[(size_t)(b * stride + i)] = (S)v.data[(size_t)i];
  }
  return out;
}

}  // namespace detail

// One optimization step over a batch of crop sets. The teacher forwards the
// two global views in eval mode with no gradients; the student forwards all
// views in training mode on one tape. Throws numeric_error if the loss goes
// non-finite.
template <typename S>
StepMetrics train_step(TrainState<S>& st, const std::vector<CropSet>& batch, const TrainRecipe& rec) {
  if (batch.empty()) throw config_error("train_step: empty batch");
  const size_t locals = batch[0].local_views.size();
  for (const auto& cs : batch) {
    if (cs.global_views.size() != 2 || cs.local_views.size() != locals) {
      throw shape_error("train_step: crop sets disagree on view counts");
    }
  }

  StepMetrics m;
  m.step = st.step;
  m.epoch = st.epoch;
  m.lr = rec.lr.value(st.step);
  m.wd = rec.wd.value(st.step);
  m.teacher_temp = rec.teacher_temp.value(st.step);
  m.ema_lambda = rec.ema_lambda.value(st.step);

  // Prototype-layer freeze window (first N epochs), if enabled.
  const bool freeze_last = st.epoch < rec.freeze_last_epochs;
  st.student.head.last_dir->trainable = !freeze_last;
  st.student.head.last_gain->trainable = !freeze_last && st.student.head.cfg.trainable_last_gain;

  // Teacher targets from the global views only.
  std::vector<Tensor<S>> teacher_logits;
  for (int g = 0; g < 2; ++g) {
    Tape<S> tt(false);
    teacher_logits.push_back(tt.val(model_forward(st.teacher, tt, tt.constant(detail::stack_view<S>(batch, true, g)))));
  }

  // Student forwards every view on one tape.
  Rng droppath(Rng::key_of({st.seed, fnv1a("droppath"), (uint64_t)st.step}));
  Rng* dp = st.student.backbone.cfg.drop_path_rate > 0 ? &droppath : nullptr;
  st.student.zero_grads();
  Tape<S> t(true);
  std::vector<int> student_views;
  for (int g = 0; g < 2; ++g) {
    student_views.push_back(model_forward(st.student, t, t.constant(detail::stack_view<S>(batch, true, g)), dp));
  }
  for (size_t l = 0; l < locals; ++l) {
    student_views.push_back(model_forward(st.student, t, t.constant(detail::stack_view<S>(batch, false, (int)l)), dp));
  }

  auto dl = dino_loss(t, student_views, teacher_logits, st.center, rec.student_temp, m.teacher_temp);
  m.loss = (double)t.val(dl.loss).data[0];
  if (!std::isfinite(m.loss)) {
    throw numeric_error(detail::strf("non-finite loss %g at step %lld (epoch %lld, lr=%.6g, wd=%.6g, tau_t=%.6g)",
                                     m.loss, (long long)m.step, (long long)m.epoch, m.lr, m.wd, m.teacher_temp));
  }
  t.backward(dl.loss);

  auto params = st.student.all_params();
  m.grad_norm = clip_grad_norm(params, rec.clip_norm);
  if (!std::isfinite(m.grad_norm)) {
    throw numeric_error(detail::strf("non-finite gradient norm at step %lld (loss=%.6g)", (long long)m.step, m.loss));
  }
  adamw_step(params, m.lr, m.wd, st.step + 1);
  ema_update(st.teacher, st.student, m.ema_lambda);
  update_center(st.center, dl.teacher_batch_mean, rec.center_momentum);
  st.step += 1;
  return m;
}

}  // namespace bcssl
