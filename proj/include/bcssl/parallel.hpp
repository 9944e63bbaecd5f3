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
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace bcssl {

// Worker count: BCSSL_THREADS env var if set, else hardware concurrency.
inline int worker_count() {
  static int n = [] {
    if (const char* env = std::getenv("BCSSL_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? (int)hc : 1;
  }();
  return n;
}

// Runs f(i) for i in [0, n). Iterations must be independent and must write to
// disjoint outputs; the index->slice partition is a pure function of (n,
// workers), so results are bitwise identical for any worker count.
template <typename F>
void parallel_for(int64_t n, F&& f) {
  int workers = worker_count();
  if (workers <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  int slices = (int)std::min<int64_t>(workers, n);
  std::vector<std::thread> pool;
  pool.reserve((size_t)slices - 1);
  auto run_slice = [&](int s) {
    int64_t begin = n * s / slices;
    int64_t end = n * (s + 1) / slices;
    for (int64_t i = begin; i < end; ++i) f(i);
  };
  for (int s = 1; s < slices; ++s) pool.emplace_back(run_slice, s);
  run_slice(0);
  for (auto& t : pool) t.join();
}

}  // namespace bcssl
