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

// Command-line surface: train / eval / viz / bench / dataset tooling.
// Success prints one machine-parseable JSON line on stdout and exits 0.
// Usage problems (bad flags, missing files) exit 2; everything else that
// fails exits 1. Errors are a single "error: ..." line on stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bcssl/analysis.hpp"
#include "bcssl/bench.hpp"
#include "bcssl/config.hpp"
#include "bcssl/trainer.hpp"

namespace {

using ojson = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path)) {
    throw UsageError(std::string("no such ") + what + " '" + path + "'");
  }
}

void emit(const ojson& doc) { std::printf("%s\n", doc.dump().c_str()); }

void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw bcssl::io_error("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw bcssl::io_error("write failure on '" + path + "'");
}

bcssl::RunConfig load_config_file(const std::string& path) {
  require_file(path, "config file");
  return bcssl::load_config(path);
}

bcssl::Dataset load_dataset_file(const std::string& path, const char* what) {
  require_file(path, what);
  return bcssl::load_dataset(path);
}

bcssl::TrainState<float> load_state(const bcssl::RunConfig& cfg, const std::string& ckpt) {
  require_file(ckpt, "checkpoint");
  auto st = bcssl::init_train_state<float>(cfg.backbone, cfg.head, cfg.seed);
  bcssl::load_checkpoint(st, ckpt);
  return st;
}

int cmd_train(const std::string& cfg_path, bool progress) {
  bcssl::RunConfig cfg = load_config_file(cfg_path);
  bcssl::Dataset train = load_dataset_file(cfg.dataset, "dataset");
  cfg.validate_against(train);
  bcssl::Dataset val;
  const bool has_val = !cfg.val_dataset.empty();
  if (has_val) val = load_dataset_file(cfg.val_dataset, "validation dataset");

  auto st = bcssl::init_train_state<float>(cfg.backbone, cfg.head, cfg.seed);
  const int64_t steps_per_epoch = train.n / cfg.batch_size;
  const bcssl::TrainRecipe recipe = bcssl::make_recipe(cfg, steps_per_epoch);

  bcssl::TrainRunOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch_size = cfg.batch_size;
  opt.monitor_every = cfg.monitor_every;
  opt.checkpoint_every = cfg.checkpoint_every;
  opt.out_dir = cfg.out_dir;
  opt.quiet = !progress;

  bcssl::KnnMonitorConfig mon;
  std::function<void(bcssl::TrainState<float>&, int)> monitor;
  if (has_val) {
    mon.extract.resolution = cfg.eval.resolution;
    mon.extract.policy = cfg.augment;
    mon.knn.k = cfg.eval.k;
    mon.knn.tau = cfg.eval.tau;
    mon.csv_path = cfg.out_dir + "/knn_monitor.csv";
    monitor = bcssl::make_knn_monitor<float>(train, val, train.num_classes, mon);
  }

  const auto history = bcssl::train_run(st, train, cfg.augment, recipe, opt, monitor);

  ojson out;
  out["command"] = "train";
  out["epochs"] = cfg.epochs;
  out["steps"] = st.step;
  out["final_loss"] = history.back().loss;
  out["checkpoint"] = cfg.out_dir + "/checkpoint_final.bcsl";
  out["metrics"] = cfg.out_dir + "/metrics.csv";
  out["resolved"] = cfg.out_dir + "/resolved.json";
  if (has_val) out["knn_monitor"] = mon.csv_path;
  emit(out);
  return 0;
}

int cmd_eval(const std::string& cfg_path, const std::string& ckpt, const std::string& dataset_override,
             const std::string& val_override, bool knn, bool probe, const std::string& out_path) {
  if (knn && probe) throw UsageError("pass at most one of --knn / --probe");
  if (!knn && !probe) knn = true;

  bcssl::RunConfig cfg = load_config_file(cfg_path);
  if (!dataset_override.empty()) cfg.dataset = dataset_override;
  if (!val_override.empty()) cfg.val_dataset = val_override;
  if (cfg.val_dataset.empty()) {
    throw UsageError("eval needs a held-out set: give 'val_dataset' in the config or --val");
  }

  bcssl::Dataset bank_ds = load_dataset_file(cfg.dataset, "dataset");
  bcssl::Dataset val_ds = load_dataset_file(cfg.val_dataset, "validation dataset");
  if (bank_ds.num_classes != val_ds.num_classes) {
    throw bcssl::config_error(bcssl::detail::strf("datasets disagree on class count: %d vs %d", bank_ds.num_classes,
                                                  val_ds.num_classes));
  }
  cfg.validate_against(bank_ds);

  auto st = load_state(cfg, ckpt);
  bcssl::ExtractOptions ex;
  ex.resolution = cfg.eval.resolution;
  ex.policy = cfg.augment;
  const bcssl::FeatureBank bank = bcssl::extract_features(st.teacher.backbone, bank_ds, ex);
  const bcssl::FeatureBank queries = bcssl::extract_features(st.teacher.backbone, val_ds, ex);

  ojson out;
  out["command"] = "eval";
  out["checkpoint"] = ckpt;
  out["n_bank"] = bank.n();
  out["n_queries"] = queries.n();
  if (knn) {
    bcssl::KnnOptions ko;
    ko.k = cfg.eval.k;
    ko.tau = cfg.eval.tau;
    const double acc = bcssl::knn_accuracy(bank, queries, bank_ds.num_classes, ko);
    out["mode"] = "knn";
    out["k"] = ko.k;
    out["tau"] = ko.tau;
    out["top1"] = acc;
  } else {
    bcssl::ProbeOptions po;
    po.epochs = cfg.eval.probe_epochs;
    po.lr = cfg.eval.probe_lr;
    po.momentum = cfg.eval.probe_momentum;
    po.batch_size = cfg.eval.probe_batch;
    po.seed = cfg.seed;
    const bcssl::ProbeResult pr = bcssl::linear_probe(bank, queries, bank_ds.num_classes, po);
    out["mode"] = "probe";
    out["epochs"] = po.epochs;
    out["train_top1"] = pr.train_accuracy;
    out["top1"] = pr.val_accuracy;
  }
  emit(out);
  if (!out_path.empty()) write_text(out_path, out.dump(2) + "\n");
  return 0;
}

int cmd_viz(const std::string& cfg_path, const std::string& ckpt, const std::string& method,
            const std::string& dataset_path, int image_index, const std::string& out_ppm, const std::string& dump_path,
            int erf_size, int erf_samples) {
  bcssl::RunConfig cfg = load_config_file(cfg_path);
  auto st = load_state(cfg, ckpt);
  bcssl::Backbone<float>& bb = st.teacher.backbone;

  bcssl::Heatmap hm;
  bcssl::Tensor<float> underlay;
  bool have_underlay = false;

  if (method == "erf") {
    bcssl::ErfOptions eo;
    eo.input_size = erf_size;
    eo.n_samples = erf_samples;
    eo.seed = cfg.seed;
    hm = bcssl::erf_map(bb, eo);
  } else {
    if (dataset_path.empty()) throw UsageError("viz --method " + method + " requires --dataset");
    bcssl::Dataset ds = load_dataset_file(dataset_path, "dataset");
    if (image_index < 0 || image_index >= ds.n) {
      throw UsageError(bcssl::detail::strf("--image-index %d outside [0, %d)", image_index, ds.n));
    }
    const bcssl::Tensor<float> input = bcssl::center_view(ds.image(image_index), cfg.eval.resolution, cfg.augment);
    // The PPM underlay is the un-normalized view the map is drawn over.
    underlay = input;
    const int64_t plane = (int64_t)cfg.eval.resolution * cfg.eval.resolution;
    for (int c = 0; c < 3; ++c) {
      for (int64_t i = 0; i < plane; ++i) {
        auto& v = underlay.data[(size_t)(c * plane + i)];
        v = (float)(v * cfg.augment.norm_std[(size_t)c] + cfg.augment.norm_mean[(size_t)c]);
      }
    }
    have_underlay = true;
    if (method == "gradcam") {
      bcssl::GradCamOptions go;
      go.feature_norm_target = true;  // checkpoints carry no classifier
      hm = bcssl::grad_cam(bb, bcssl::ProbeResult{}, input, go);
    } else {
      hm = bcssl::eigen_cam(bb, input);
      hm = bcssl::upsample_heatmap(hm, cfg.eval.resolution, cfg.eval.resolution);
    }
  }

  const auto parent = std::filesystem::path(out_ppm).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  if (have_underlay) {
    bcssl::write_heatmap_ppm(hm, underlay, out_ppm);
  } else {
    bcssl::write_heatmap_ppm(hm, out_ppm);
  }
  if (!dump_path.empty()) bcssl::save_heatmap(dump_path, hm);

  ojson out;
  out["command"] = "viz";
  out["method"] = method;
  out["out"] = out_ppm;
  out["height"] = hm.height();
  out["width"] = hm.width();
  out["area_fraction_0.2"] = bcssl::area_fraction(hm, 0.2);
  if (!dump_path.empty()) out["dump"] = dump_path;
  emit(out);
  return 0;
}

int cmd_dataset_synth(int classes, int per_class, int size, uint64_t seed, const std::string& out_path) {
  bcssl::SynthSpec spec;
  spec.classes = classes;
  spec.samples_per_class = per_class;
  spec.image_size = size;
  spec.seed = seed;
  const bcssl::Dataset ds = bcssl::generate_synthetic(spec);
  const auto parent = std::filesystem::path(out_path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  bcssl::write_dataset(out_path, ds);

  ojson out;
  out["command"] = "dataset synth";
  out["out"] = out_path;
  out["n"] = ds.n;
  out["classes"] = ds.num_classes;
  out["size"] = ds.height;
  out["seed"] = seed;
  emit(out);
  return 0;
}

int cmd_bench(const std::string& cfg_path, const std::string& csv_override) {
  bcssl::RunConfig cfg = load_config_file(cfg_path);
  const bcssl::BenchReport rep = bcssl::bench_throughput(cfg);
  std::fputs(bcssl::bench_table(rep).c_str(), stdout);
  const std::string csv_path = csv_override.empty() ? cfg.out_dir + "/bench.csv" : csv_override;
  write_text(csv_path, bcssl::bench_csv(rep));

  ojson out;
  out["command"] = "bench";
  out["rows"] = rep.rows.size();
  out["threads"] = rep.threads;
  out["gate_max_diff"] = rep.gate_max_diff;
  out["csv"] = csv_path;
  emit(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bcssl — self-supervised convnet training, evaluation, and analysis"};
  app.require_subcommand(1);

  std::string cfg_path, checkpoint, dataset, val, out, method, dump, csv;
  int image_index = 0, classes = 3, per_class = 100, size = 64, erf_size = 96, erf_samples = 32;
  uint64_t seed = 0;
  bool knn = false, probe = false, progress = false;

  auto* tr = app.add_subcommand("train", "Pre-train from a JSON config");
  tr->add_option("--config", cfg_path, "JSON run config")->required();
  tr->add_flag("--progress", progress, "print per-epoch progress to stderr");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint with k-NN or a linear probe");
  ev->add_option("--config", cfg_path, "JSON run config")->required();
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--dataset", dataset, "override the config's feature-bank dataset");
  ev->add_option("--val", val, "override the config's held-out dataset");
  ev->add_flag("--knn", knn, "weighted k-NN evaluation (default)");
  ev->add_flag("--probe", probe, "linear probe on frozen features");
  ev->add_option("--out", out, "also write the metrics JSON to this file");

  auto* vz = app.add_subcommand("viz", "Render a heatmap to PPM");
  vz->add_option("--config", cfg_path, "JSON run config")->required();
  vz->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  vz->add_option("--method", method, "gradcam, eigencam, or erf")
      ->required()
      ->check(CLI::IsMember({"gradcam", "eigencam", "erf"}));
  vz->add_option("--dataset", dataset, "dataset with the probe image (gradcam/eigencam)");
  vz->add_option("--image-index", image_index, "image index within --dataset");
  vz->add_option("--out", out, "output PPM path")->required();
  vz->add_option("--dump", dump, "also save the raw heatmap values here");
  vz->add_option("--erf-size", erf_size, "input size for --method erf (default 96)");
  vz->add_option("--erf-samples", erf_samples, "sample count for --method erf (default 32)");

  auto* dst = app.add_subcommand("dataset", "Dataset tooling");
  dst->require_subcommand(1);
  auto* sy = dst->add_subcommand("synth", "Generate a synthetic labelled dataset");
  sy->add_option("--classes", classes, "number of classes (default 3)");
  sy->add_option("--n", per_class, "samples per class (default 100)");
  sy->add_option("--size", size, "image side in pixels (default 64)");
  sy->add_option("--seed", seed, "generator seed (default 0)");
  sy->add_option("--out", out, "output BCDS path")->required();

  auto* bn = app.add_subcommand("bench", "Forward-pass throughput benchmark with BN folding");
  bn->add_option("--config", cfg_path, "JSON run config")->required();
  bn->add_option("--csv", csv, "CSV output path (default <out_dir>/bench.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  try {
    if (app.got_subcommand(tr)) return cmd_train(cfg_path, progress);
    if (app.got_subcommand(ev)) return cmd_eval(cfg_path, checkpoint, dataset, val, knn, probe, out);
    if (app.got_subcommand(vz)) {
      return cmd_viz(cfg_path, checkpoint, method, dataset, image_index, out, dump, erf_size, erf_samples);
    }
    if (app.got_subcommand(dst)) return cmd_dataset_synth(classes, per_class, size, seed, out);
    if (app.got_subcommand(bn)) return cmd_bench(cfg_path, csv);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const bcssl::io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
