// Copyright 2026 The segtransvae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "stv/parallel.hpp"

#include <cstdlib>
#include <thread>
#include <vector>

namespace stv {

int thread_budget() {
  static const int budget = [] {
    const char* env = std::getenv("SEGTRANSVAE_THREADS");
    if (env == nullptr) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v <= 1) return 1;
    const long hw = static_cast<long>(std::thread::hardware_concurrency());
    return static_cast<int>(hw > 0 && v > hw ? hw : v);
  }();
  return budget;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  const int budget = thread_budget();
  if (n <= 0) return;
  if (budget <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  const int workers = static_cast<int>(n < budget ? n : budget);
  const int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    const int64_t begin = w * chunk;
    const int64_t end = begin + chunk < n ? begin + chunk : n;
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace stv
