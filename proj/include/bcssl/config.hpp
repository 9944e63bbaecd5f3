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

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "bcssl/dataset.hpp"
#include "bcssl/dino.hpp"

namespace bcssl {

// Run configuration: one JSON document that fully determines a run. Parsing
// is strict — unknown keys are rejected by dotted name — and every default is
// materialized, so the echo written as resolved.json can be fed back in and
// reproduces the run byte for byte. Checks that need the dataset contents
// (k <= N, batch <= N) live in validate_against(), called once the dataset is
// loaded and always before any compute.

struct RecipeSettings {
  int warmup_epochs = 10;
  double wd_start = 0.04, wd_end = 0.4;
  double teacher_temp_start = 0.04, teacher_temp_end = 0.07;
  int teacher_temp_warmup_epochs = 30;
  bool flat_teacher_temp = false;  // 0.4 flat preset instead of the ramp
  double ema_lambda_start = 0.996;
  double student_temp = 0.1;
  double center_momentum = 0.9;
  double clip_norm = 3.0;
  int freeze_last_epochs = 0;
};

struct EvalSettings {
  int k = 20;
  double tau = 0.07;
  int resolution = 64;
  int probe_epochs = 100;
  double probe_lr = 0.001;
  double probe_momentum = 0.9;
  int probe_batch = 64;
};

struct BenchSettings {
  std::vector<int> batches{1, 8};
  int warmup_iters = 2;
  int timed_iters = 5;
  int resolution = 64;
};

struct RunConfig {
  std::string dataset;      // training BCDS file (required)
  std::string val_dataset;  // optional held-out BCDS file
  int epochs = 0;           // required
  int batch_size = 64;
  uint64_t seed = 0;
  std::string out_dir = "run";
  double lr = 0.0;  // 0 = resolve from batch size (0.0005 * batch / 256)
  int monitor_every = 20;
  int checkpoint_every = 0;
  BackboneConfig backbone = BackboneConfig::nano();
  DinoHeadConfig head;
  AugmentPolicy augment;
  RecipeSettings recipe;
  EvalSettings eval;
  BenchSettings bench;

  void validate() const {
    if (dataset.empty()) throw config_error("missing required config key 'dataset'");
    if (epochs < 1) throw config_error("config key 'epochs' must be >= 1");
    if (batch_size < 1) throw config_error("config key 'batch_size' must be >= 1");
    if (!(lr > 0)) throw config_error("config key 'lr' must be positive");
    if (monitor_every < 0 || checkpoint_every < 0) {
      throw config_error("config keys 'monitor_every' and 'checkpoint_every' must be >= 0");
    }
    if (backbone.kernel_size % 2 == 0) throw config_error("kernel_size must be odd");
    backbone.validate();
    if (head.hidden_dim < 1 || head.bottleneck_dim < 1 || head.out_dim < 2) {
      throw config_error("head dims must be positive (out_dim >= 2)");
    }
    augment.validate();
    const int red = backbone.reduction();
    if (augment.global_size % red != 0 || augment.local_size % red != 0) {
      throw config_error(detail::strf("crop sizes must be multiples of the backbone reduction %d", red));
    }
    if (recipe.warmup_epochs < 0 || recipe.teacher_temp_warmup_epochs < 0 || recipe.freeze_last_epochs < 0) {
      throw config_error("recipe epoch counts must be >= 0");
    }
    if (!(recipe.student_temp > 0) || !(recipe.teacher_temp_start > 0) || !(recipe.teacher_temp_end > 0)) {
      throw config_error("temperatures must be positive");
    }
    if (recipe.center_momentum < 0 || recipe.center_momentum > 1 || recipe.ema_lambda_start < 0 ||
        recipe.ema_lambda_start > 1) {
      throw config_error("momenta must lie in [0, 1]");
    }
    if (!(recipe.clip_norm > 0)) throw config_error("config key 'recipe.clip_norm' must be positive");
    if (eval.k < 1) throw config_error("config key 'eval.k' must be >= 1");
    if (!(eval.tau > 0)) throw config_error("config key 'eval.tau' must be positive");
    if (eval.probe_epochs < 1 || eval.probe_batch < 1 || !(eval.probe_lr > 0) || eval.probe_momentum < 0) {
      throw config_error("probe settings must be positive");
    }
    if (eval.resolution % red != 0) {
      throw config_error(detail::strf("config key 'eval.resolution' must be a multiple of %d", red));
    }
    if (bench.batches.empty()) throw config_error("config key 'bench.batches' must be non-empty");
    for (int b : bench.batches) {
      if (b < 1) throw config_error("config key 'bench.batches' entries must be >= 1");
    }
    if (bench.warmup_iters < 1) throw config_error("config key 'bench.warmup_iters' must be >= 1");
    if (bench.timed_iters < 1) throw config_error("bench requires at least one timed iteration");
    if (bench.resolution % red != 0) {
      throw config_error(detail::strf("config key 'bench.resolution' must be a multiple of %d", red));
    }
  }

  // Dataset-dependent cross-checks; run after load, before any compute.
  void validate_against(const Dataset& ds) const {
    if (eval.k > ds.n) {
      throw config_error(detail::strf("config key 'eval.k' (%d) exceeds the dataset size %d", eval.k, ds.n));
    }
    if (batch_size > ds.n) {
      throw config_error(detail::strf("config key 'batch_size' (%d) exceeds the dataset size %d", batch_size, ds.n));
    }
  }
};

namespace detail {

using ojson = nlohmann::ordered_json;

inline std::string key_path(const std::string& section, const std::string& key) {
  return section.empty() ? key : section + "." + key;
}

// Strict reader over one JSON object: every get_* marks its key as consumed,
// and finish() rejects whatever was not consumed, naming the key.
class ConfigReader {
 public:
  ConfigReader(const ojson& obj, std::string section) : obj_(obj), section_(std::move(section)) {
    if (!obj_.is_object()) {
      throw config_error("config section '" + (section_.empty() ? std::string("<root>") : section_) +
                         "' must be a JSON object");
    }
  }

  const ojson* find(const std::string& key) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  bool get_int(const std::string& key, int& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_number_integer() && !v->is_number_unsigned()) {
      throw config_error("config key '" + key_path(section_, key) + "' must be an integer");
    }
    out = v->get<int>();
    return true;
  }

  bool get_u64(const std::string& key, uint64_t& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<int64_t>() >= 0)) {
      throw config_error("config key '" + key_path(section_, key) + "' must be a non-negative integer");
    }
    out = v->get<uint64_t>();
    return true;
  }

  bool get_num(const std::string& key, double& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_number()) throw config_error("config key '" + key_path(section_, key) + "' must be a number");
    out = v->get<double>();
    return true;
  }

  bool get_bool(const std::string& key, bool& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_boolean()) throw config_error("config key '" + key_path(section_, key) + "' must be a boolean");
    out = v->get<bool>();
    return true;
  }

  bool get_str(const std::string& key, std::string& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_string()) throw config_error("config key '" + key_path(section_, key) + "' must be a string");
    out = v->get<std::string>();
    return true;
  }

  // Fixed-length numeric array, e.g. ranges [lo, hi] or per-channel triples.
  template <typename T, size_t N>
  bool get_array(const std::string& key, std::array<T, N>& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_array() || v->size() != N) {
      throw config_error("config key '" + key_path(section_, key) + "' must be an array of " + std::to_string(N) +
                         " numbers");
    }
    for (size_t i = 0; i < N; ++i) {
      const bool ok = std::is_integral_v<T> ? (*v)[i].is_number_integer() || (*v)[i].is_number_unsigned()
                                            : (*v)[i].is_number();
      if (!ok) {
        throw config_error("config key '" + key_path(section_, key) + "' must be an array of " + std::to_string(N) +
                           (std::is_integral_v<T> ? " integers" : " numbers"));
      }
      out[i] = (*v)[i].get<T>();
    }
    return true;
  }

  bool get_int_list(const std::string& key, std::vector<int>& out) {
    const ojson* v = find(key);
    if (!v) return false;
    if (!v->is_array()) throw config_error("config key '" + key_path(section_, key) + "' must be an integer array");
    out.clear();
    for (const auto& e : *v) {
      if (!e.is_number_integer() && !e.is_number_unsigned()) {
        throw config_error("config key '" + key_path(section_, key) + "' must be an integer array");
      }
      out.push_back(e.get<int>());
    }
    return true;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw config_error("unknown config key '" + key_path(section_, it.key()) + "'");
      }
    }
  }

 private:
  const ojson& obj_;
  std::string section_;
  std::set<std::string> seen_;
};

inline void parse_backbone(const ojson& o, BackboneConfig& bc) {
  ConfigReader r(o, "backbone");
  std::string variant;
  if (r.get_str("variant", variant)) {
    if (variant == "nano") {
      bc = BackboneConfig::nano(bc.kernel_size, bc.use_bn_after_dw);
    } else if (variant == "tiny") {
      bc = BackboneConfig::tiny(bc.kernel_size, bc.use_bn_after_dw);
    } else {
      throw config_error("config key 'backbone.variant' must be 'nano' or 'tiny', got '" + variant + "'");
    }
  }
  r.get_array("depths", bc.depths);
  r.get_array("dims", bc.dims);
  r.get_int("kernel_size", bc.kernel_size);
  r.get_bool("use_bn_after_dw", bc.use_bn_after_dw);
  r.get_int("stem_patch", bc.stem_patch);
  r.get_num("layer_scale_init", bc.layer_scale_init);
  r.get_num("drop_path_rate", bc.drop_path_rate);
  r.get_num("bn_momentum", bc.bn_momentum);
  r.get_num("bn_eps", bc.bn_eps);
  r.get_num("ln_eps", bc.ln_eps);
  r.finish();
}

inline void parse_head(const ojson& o, DinoHeadConfig& hc) {
  ConfigReader r(o, "head");
  r.get_int("hidden_dim", hc.hidden_dim);
  r.get_int("bottleneck_dim", hc.bottleneck_dim);
  r.get_int("out_dim", hc.out_dim);
  r.get_bool("trainable_last_gain", hc.trainable_last_gain);
  r.finish();
}

inline void parse_augment(const ojson& o, AugmentPolicy& p) {
  ConfigReader r(o, "augment");
  r.get_int("global_size", p.global_size);
  r.get_int("local_size", p.local_size);
  r.get_int("local_count", p.local_count);
  std::array<double, 2> range{};
  if (r.get_array("global_scale", range)) p.global_scale_lo = range[0], p.global_scale_hi = range[1];
  if (r.get_array("local_scale", range)) p.local_scale_lo = range[0], p.local_scale_hi = range[1];
  if (r.get_array("aspect", range)) p.aspect_lo = range[0], p.aspect_hi = range[1];
  r.get_num("flip_p", p.flip_p);
  r.get_num("jitter_p", p.jitter_p);
  r.get_num("jitter_brightness", p.jitter_brightness);
  r.get_num("jitter_contrast", p.jitter_contrast);
  r.get_num("jitter_saturation", p.jitter_saturation);
  r.get_num("jitter_hue", p.jitter_hue);
  r.get_num("grayscale_p", p.grayscale_p);
  r.get_num("blur_p_global1", p.blur_p_global1);
  r.get_num("blur_p_global2", p.blur_p_global2);
  r.get_num("blur_p_local", p.blur_p_local);
  if (r.get_array("blur_sigma", range)) p.blur_sigma_lo = range[0], p.blur_sigma_hi = range[1];
  r.get_num("solarize_p", p.solarize_p);
  r.get_num("solarize_threshold", p.solarize_threshold);
  r.get_array("norm_mean", p.norm_mean);
  r.get_array("norm_std", p.norm_std);
  r.finish();
}

inline void parse_recipe(const ojson& o, RecipeSettings& rc) {
  ConfigReader r(o, "recipe");
  r.get_int("warmup_epochs", rc.warmup_epochs);
  r.get_num("wd_start", rc.wd_start);
  r.get_num("wd_end", rc.wd_end);
  r.get_num("teacher_temp_start", rc.teacher_temp_start);
  r.get_num("teacher_temp_end", rc.teacher_temp_end);
  r.get_int("teacher_temp_warmup_epochs", rc.teacher_temp_warmup_epochs);
  r.get_bool("flat_teacher_temp", rc.flat_teacher_temp);
  r.get_num("ema_lambda_start", rc.ema_lambda_start);
  r.get_num("student_temp", rc.student_temp);
  r.get_num("center_momentum", rc.center_momentum);
  r.get_num("clip_norm", rc.clip_norm);
  r.get_int("freeze_last_epochs", rc.freeze_last_epochs);
  r.finish();
}

inline void parse_eval(const ojson& o, EvalSettings& ev) {
  ConfigReader r(o, "eval");
  r.get_int("k", ev.k);
  r.get_num("tau", ev.tau);
  r.get_int("resolution", ev.resolution);
  r.get_int("probe_epochs", ev.probe_epochs);
  r.get_num("probe_lr", ev.probe_lr);
  r.get_num("probe_momentum", ev.probe_momentum);
  r.get_int("probe_batch", ev.probe_batch);
  r.finish();
}

inline void parse_bench(const ojson& o, BenchSettings& bn) {
  ConfigReader r(o, "bench");
  r.get_int_list("batches", bn.batches);
  r.get_int("warmup_iters", bn.warmup_iters);
  r.get_int("timed_iters", bn.timed_iters);
  r.get_int("resolution", bn.resolution);
  r.finish();
}

}  // namespace detail

// Parses and validates a config document. The result has every default
// materialized (including the resolved learning rate).
inline RunConfig parse_config(const std::string& text) {
  detail::ojson doc;
  try {
    doc = detail::ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }

  RunConfig cfg;
  detail::ConfigReader r(doc, "");
  if (!r.get_str("dataset", cfg.dataset)) throw config_error("missing required config key 'dataset'");
  r.get_str("val_dataset", cfg.val_dataset);
  if (!r.get_int("epochs", cfg.epochs)) throw config_error("missing required config key 'epochs'");
  r.get_int("batch_size", cfg.batch_size);
  r.get_u64("seed", cfg.seed);
  r.get_str("out_dir", cfg.out_dir);
  r.get_num("lr", cfg.lr);
  r.get_int("monitor_every", cfg.monitor_every);
  r.get_int("checkpoint_every", cfg.checkpoint_every);
  if (const auto* o = r.find("backbone")) detail::parse_backbone(*o, cfg.backbone);
  if (const auto* o = r.find("head")) detail::parse_head(*o, cfg.head);
  if (const auto* o = r.find("augment")) detail::parse_augment(*o, cfg.augment);
  if (const auto* o = r.find("recipe")) detail::parse_recipe(*o, cfg.recipe);
  if (const auto* o = r.find("eval")) detail::parse_eval(*o, cfg.eval);
  if (const auto* o = r.find("bench")) detail::parse_bench(*o, cfg.bench);
  r.finish();

  if (cfg.batch_size >= 1 && cfg.lr == 0.0) cfg.lr = resolve_lr(cfg.batch_size);
  cfg.head.in_dim = cfg.backbone.feature_dim();
  cfg.validate();
  return cfg;
}

// Serializes a config with every field materialized, in a fixed key order,
// so identical configs render byte-identically and the output re-parses to
// the same config.
inline std::string resolved_json(const RunConfig& cfg) {
  using detail::ojson;
  ojson doc;
  doc["dataset"] = cfg.dataset;
  doc["val_dataset"] = cfg.val_dataset;
  doc["epochs"] = cfg.epochs;
  doc["batch_size"] = cfg.batch_size;
  doc["seed"] = cfg.seed;
  doc["out_dir"] = cfg.out_dir;
  doc["lr"] = cfg.lr;
  doc["monitor_every"] = cfg.monitor_every;
  doc["checkpoint_every"] = cfg.checkpoint_every;
  ojson& bb = doc["backbone"] = ojson::object();
  bb["variant"] = cfg.backbone.variant;
  bb["depths"] = cfg.backbone.depths;
  bb["dims"] = cfg.backbone.dims;
  bb["kernel_size"] = cfg.backbone.kernel_size;
  bb["use_bn_after_dw"] = cfg.backbone.use_bn_after_dw;
  bb["stem_patch"] = cfg.backbone.stem_patch;
  bb["layer_scale_init"] = cfg.backbone.layer_scale_init;
  bb["drop_path_rate"] = cfg.backbone.drop_path_rate;
  bb["bn_momentum"] = cfg.backbone.bn_momentum;
  bb["bn_eps"] = cfg.backbone.bn_eps;
  bb["ln_eps"] = cfg.backbone.ln_eps;
  ojson& hd = doc["head"] = ojson::object();
  hd["hidden_dim"] = cfg.head.hidden_dim;
  hd["bottleneck_dim"] = cfg.head.bottleneck_dim;
  hd["out_dim"] = cfg.head.out_dim;
  hd["trainable_last_gain"] = cfg.head.trainable_last_gain;
  ojson& au = doc["augment"] = ojson::object();
  au["global_size"] = cfg.augment.global_size;
  au["local_size"] = cfg.augment.local_size;
  au["local_count"] = cfg.augment.local_count;
  au["global_scale"] = std::array<double, 2>{cfg.augment.global_scale_lo, cfg.augment.global_scale_hi};
  au["local_scale"] = std::array<double, 2>{cfg.augment.local_scale_lo, cfg.augment.local_scale_hi};
  au["aspect"] = std::array<double, 2>{cfg.augment.aspect_lo, cfg.augment.aspect_hi};
  au["flip_p"] = cfg.augment.flip_p;
  au["jitter_p"] = cfg.augment.jitter_p;
  au["jitter_brightness"] = cfg.augment.jitter_brightness;
  au["jitter_contrast"] = cfg.augment.jitter_contrast;
  au["jitter_saturation"] = cfg.augment.jitter_saturation;
  au["jitter_hue"] = cfg.augment.jitter_hue;
  au["grayscale_p"] = cfg.augment.grayscale_p;
  au["blur_p_global1"] = cfg.augment.blur_p_global1;
  au["blur_p_global2"] = cfg.augment.blur_p_global2;
  au["blur_p_local"] = cfg.augment.blur_p_local;
  au["blur_sigma"] = std::array<double, 2>{cfg.augment.blur_sigma_lo, cfg.augment.blur_sigma_hi};
  au["solarize_p"] = cfg.augment.solarize_p;
  au["solarize_threshold"] = cfg.augment.solarize_threshold;
  au["norm_mean"] = cfg.augment.norm_mean;
  au["norm_std"] = cfg.augment.norm_std;
  ojson& rc = doc["recipe"] = ojson::object();
  rc["warmup_epochs"] = cfg.recipe.warmup_epochs;
  rc["wd_start"] = cfg.recipe.wd_start;
  rc["wd_end"] = cfg.recipe.wd_end;
  rc["teacher_temp_start"] = cfg.recipe.teacher_temp_start;
  rc["teacher_temp_end"] = cfg.recipe.teacher_temp_end;
  rc["teacher_temp_warmup_epochs"] = cfg.recipe.teacher_temp_warmup_epochs;
  rc["flat_teacher_temp"] = cfg.recipe.flat_teacher_temp;
  rc["ema_lambda_start"] = cfg.recipe.ema_lambda_start;
  rc["student_temp"] = cfg.recipe.student_temp;
  rc["center_momentum"] = cfg.recipe.center_momentum;
  rc["clip_norm"] = cfg.recipe.clip_norm;
  rc["freeze_last_epochs"] = cfg.recipe.freeze_last_epochs;
  ojson& ev = doc["eval"] = ojson::object();
  ev["k"] = cfg.eval.k;
  ev["tau"] = cfg.eval.tau;
  ev["resolution"] = cfg.eval.resolution;
  ev["probe_epochs"] = cfg.eval.probe_epochs;
  ev["probe_lr"] = cfg.eval.probe_lr;
  ev["probe_momentum"] = cfg.eval.probe_momentum;
  ev["probe_batch"] = cfg.eval.probe_batch;
  ojson& bn = doc["bench"] = ojson::object();
  bn["batches"] = cfg.bench.batches;
  bn["warmup_iters"] = cfg.bench.warmup_iters;
  bn["timed_iters"] = cfg.bench.timed_iters;
  bn["resolution"] = cfg.bench.resolution;
  return doc.dump(2) + "\n";
}

// Writes <out_dir>/resolved.json, creating the directory if needed.
inline std::string write_resolved(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/resolved.json";
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open '" + path + "' for writing");
  f << resolved_json(cfg);
  if (!f) throw io_error("write failure on '" + path + "'");
  return path;
}

// Loads a config file, materializes defaults, and echoes the resolved
// document into the output directory for provenance.
inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "' for reading");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  RunConfig cfg = parse_config(text);
  write_resolved(cfg);
  return cfg;
}

// Builds the training recipe the config describes for a run of
// epochs * steps_per_epoch steps. Mirrors default_recipe at default settings.
inline TrainRecipe make_recipe(const RunConfig& cfg, int64_t steps_per_epoch) {
  if (steps_per_epoch < 1) throw config_error("recipe needs at least one step per epoch");
  const int64_t total = (int64_t)cfg.epochs * steps_per_epoch;
  TrainRecipe r;
  r.lr = Schedule::cosine(cfg.lr, 1e-6, total, std::min<int64_t>(cfg.recipe.warmup_epochs * steps_per_epoch, total));
  r.wd = Schedule::cosine(cfg.recipe.wd_start, cfg.recipe.wd_end, total);
  r.teacher_temp =
      cfg.recipe.flat_teacher_temp
          ? flat_teacher_temp(total)
          : Schedule::linear_then_const(cfg.recipe.teacher_temp_start, cfg.recipe.teacher_temp_end, total,
                                        std::min<int64_t>(cfg.recipe.teacher_temp_warmup_epochs * steps_per_epoch,
                                                          total));
  r.ema_lambda = Schedule::cosine(cfg.recipe.ema_lambda_start, 1.0, total);
  r.student_temp = cfg.recipe.student_temp;
  r.center_momentum = cfg.recipe.center_momentum;
  r.clip_norm = cfg.recipe.clip_norm;
  r.freeze_last_epochs = cfg.recipe.freeze_last_epochs;
  return r;
}

}  // namespace bcssl
