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

#include "stv/gradcheck.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "stv/tape.hpp"

namespace stv {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& point) {
  NoGradScope no_grad;
  Tensor y = f(point);
  if (y.numel() != 1) {
    throw ContractError("finite_diff_check: probe must return a scalar");
  }
  return y.item();
}

Tensor perturbed(const Tensor& point, int64_t coord, double delta) {
  Tensor p = point.clone();
  p.set_requires_grad(false);
  if (p.dtype() == Dtype::f32) {
    auto buf = p.mut<float>();
    buf[static_cast<size_t>(coord)] += static_cast<float>(delta);
  } else {
    auto buf = p.mut<double>();
    buf[static_cast<size_t>(coord)] += delta;
  }
  return p;
}

double run_check(const ScalarFn& f, const Tensor& point,
                 std::span<const int64_t> coords, double eps) {
  // Determinism contract: two evaluations at the same point must agree
  // bitwise, otherwise finite differences are meaningless.
  const double y0 = eval_scalar(f, point);
  const double y1 = eval_scalar(f, point);
  if (std::memcmp(&y0, &y1, sizeof(double)) != 0) {
    throw ContractError(
        "finite_diff_check: probe is not deterministic (values " +
        std::to_string(y0) + " vs " + std::to_string(y1) + ")");
  }

  Tensor analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor p = point.clone();
    p.set_requires_grad(true);
    Tensor y = f(p);
    if (y.numel() != 1) {
      throw ContractError("finite_diff_check: probe must return a scalar");
    }
    tape.backward(y);
    analytic = tape.grad_or_zero(p);
  }

  double max_rel = 0.0;
  for (int64_t c : coords) {
    const double fp = eval_scalar(f, perturbed(point, c, eps));
    const double fm = eval_scalar(f, perturbed(point, c, -eps));
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic.value_at(c);
    const double denom =
        std::max(std::max(std::abs(a), std::abs(numeric)), 1e-8);
    const double rel = std::abs(a - numeric) / denom;
    if (rel > max_rel) max_rel = rel;
  }
  return max_rel;
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor& point, double eps) {
  std::vector<int64_t> coords(static_cast<size_t>(point.numel()));
  std::iota(coords.begin(), coords.end(), 0);
  return run_check(f, point, coords, eps);
}

double finite_diff_check_coords(const ScalarFn& f, const Tensor& point,
                                std::span<const int64_t> coords, double eps) {
  return run_check(f, point, coords, eps);
}

}  // namespace stv
