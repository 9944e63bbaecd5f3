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

#include <fstream>
#include <functional>
#include <numeric>

#include "bcssl/checkpoint.hpp"
#include "bcssl/dataset.hpp"

namespace bcssl {

struct TrainRunOptions {
  int epochs = 100;
  int batch_size = 64;
  int monitor_every = 20;    // epochs between monitor-hook calls; 0 disables
  int checkpoint_every = 0;  // epochs between periodic checkpoints; 0 = final only
  std::string out_dir = ".";
  std::string metrics_path;  // defaults to <out_dir>/metrics.csv
  bool quiet = true;         // suppress per-epoch stderr progress
};

// Pre-train loop. Deterministic end to end: the per-epoch sample order is
// keyed by (seed, epoch); crops are keyed by (seed, epoch, sample index);
// drop-path by (seed, step). Resuming a loaded TrainState therefore
// reproduces the uninterrupted run bit for bit. Partial trailing batches are
// dropped. The monitor hook (if any) runs every `monitor_every` epochs and at
// the end; checkpoints go to <out_dir>/checkpoint_ep<N>.bcsl and
// <out_dir>/checkpoint_final.bcsl; metrics rows append to the CSV log.
template <typename S>
std::vector<StepMetrics> train_run(TrainState<S>& st, const Dataset& ds, const AugmentPolicy& pol,
                                   const TrainRecipe& rec, const TrainRunOptions& opt,
                                   const std::function<void(TrainState<S>&, int)>& monitor = {}) {
  ds.validate();
  pol.validate();
  if (opt.epochs < 1) throw config_error("train_run: epochs must be >= 1");
  if (opt.batch_size < 1) throw config_error("train_run: batch_size must be >= 1");
  const int64_t steps_per_epoch = ds.n / opt.batch_size;
  if (steps_per_epoch < 1) throw config_error("train_run: batch_size exceeds the dataset size");
  if (st.epoch > opt.epochs) throw config_error("train_run: state is already past the requested epoch count");

  std::filesystem::create_directories(opt.out_dir);
  const std::string metrics_path = opt.metrics_path.empty() ? opt.out_dir + "/metrics.csv" : opt.metrics_path;
  const bool fresh_log = !std::filesystem::exists(metrics_path) || std::filesystem::file_size(metrics_path) == 0;
  std::ofstream log(metrics_path, std::ios::app);
  if (!log) throw io_error("cannot open metrics log '" + metrics_path + "'");
  if (fresh_log) log << kMetricsHeader << "\n";

  const uint64_t order_tag = fnv1a("epoch-order");
  std::vector<StepMetrics> history;
  history.reserve((size_t)((opt.epochs - st.epoch) * steps_per_epoch));
  std::vector<CropSet> batch((size_t)opt.batch_size);

  for (int64_t epoch = st.epoch; epoch < opt.epochs; ++epoch) {
    st.epoch = epoch;
    std::vector<int> order((size_t)ds.n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(Rng::key_of({st.seed, order_tag, (uint64_t)epoch}));
    shuffle_rng.shuffle(order);

    for (int64_t b = 0; b < steps_per_epoch; ++b) {
      for (int i = 0; i < opt.batch_size; ++i) {
        const int idx = order[(size_t)(b * opt.batch_size + i)];
        batch[(size_t)i] = multi_crop(ds.image(idx), pol, RngStamp{st.seed, epoch, idx});
      }
      history.push_back(train_step(st, batch, rec));
      log << metrics_csv_row(history.back()) << "\n";
    }
    log.flush();
    if (!log) throw io_error("write failure on metrics log '" + metrics_path + "'");
    st.epoch = epoch + 1;

    const bool last = epoch + 1 == opt.epochs;
    if (!opt.quiet) {
      std::fprintf(stderr, "epoch %lld/%d loss %.4f lr %.3g\n", (long long)(epoch + 1), opt.epochs,
                   history.back().loss, history.back().lr);
    }
    if (monitor && opt.monitor_every > 0 && ((epoch + 1) % opt.monitor_every == 0 || last)) {
      monitor(st, (int)(epoch + 1));
    }
    if (opt.checkpoint_every > 0 && (epoch + 1) % opt.checkpoint_every == 0 && !last) {
      save_checkpoint(st, opt.out_dir + "/checkpoint_ep" + std::to_string(epoch + 1) + ".bcsl");
    }
  }
  save_checkpoint(st, opt.out_dir + "/checkpoint_final.bcsl");
  return history;
}

}  // namespace bcssl
