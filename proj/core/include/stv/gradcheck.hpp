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

#ifndef STV_GRADCHECK_HPP_
#define STV_GRADCHECK_HPP_

#include <functional>
#include <span>

#include "stv/tensor.hpp"

namespace stv {

/// Scalar-valued probe: receives the perturbed point and must return a
/// one-element tensor. It must be deterministic; this is verified by
/// evaluating it twice and comparing bitwise.
using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Central-difference gradient check of f at `point` over every coordinate.
/// Returns max over coordinates of
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// f64 points with eps around 1e-5 are recommended.
double finite_diff_check(const ScalarFn& f, const Tensor& point, double eps);

/// Same check restricted to the given flat coordinates of `point`.
double finite_diff_check_coords(const ScalarFn& f, const Tensor& point,
                                std::span<const int64_t> coords, double eps);

}  // namespace stv

#endif  // STV_GRADCHECK_HPP_
