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

#ifndef STV_PARALLEL_HPP_
#define STV_PARALLEL_HPP_

#include <cstdint>
#include <functional>

namespace stv {

/// Kernel thread budget, read once from SEGTRANSVAE_THREADS. Unset, 0 or 1
/// mean single-threaded execution, which is bitwise deterministic and the
/// test default.
int thread_budget();

/// Runs fn(begin, end) over a partition of [0, n). Work is split by index
/// range, so each output element is written by exactly one thread and
/// results do not depend on the budget.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace stv

#endif  // STV_PARALLEL_HPP_
