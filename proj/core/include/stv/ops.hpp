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

#ifndef STV_OPS_HPP_
#define STV_OPS_HPP_

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "stv/tape.hpp"
#include "stv/tensor.hpp"

namespace stv::ops {

// Binary elementwise ops accept equal shapes, or shapes that differ only on
// the two leading (batch, channel) positions after right-alignment, where the
// smaller operand must have extent 1. No other broadcasting is performed.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor gelu(const Tensor& x);
Tensor neg(const Tensor& x);
/// c * x  (scalar constant, not a tensor operand).
Tensor scale(const Tensor& x, double c);
/// x + c
Tensor shift(const Tensor& x, double c);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Accumulation order of a reduction. `value_sorted` sums terms in ascending
/// value order, making the result invariant under any permutation of the
/// reduced axis (used along the token axis of attention).
enum class SumOrder { sequential, value_sorted };

/// Batched matrix product [...,m,k] x [...,k,n] -> [...,m,n]; leading batch
/// dims broadcast where one side has extent 1.
Tensor matmul(const Tensor& a, const Tensor& b,
              SumOrder order = SumOrder::sequential);

/// Row-major element-preserving reshape; one extent may be -1 (inferred).
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, std::vector<int> perm);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
/// Zero padding; pads[i] = {before, after} for axis i.
Tensor pad(const Tensor& x, std::vector<std::pair<int64_t, int64_t>> pads);
Tensor reduce_sum(const Tensor& x, std::vector<int> axes,
                  bool keepdims = false);
Tensor reduce_mean(const Tensor& x, std::vector<int> axes,
                   bool keepdims = false);

/// Numerically stable softmax along `axis` (max subtraction; value-sorted
/// denominator accumulation).
Tensor softmax(const Tensor& x, int axis);

// --- helpers shared by the layer kernels ---

/// Sums `g` down to `target_shape` (which must be reachable from g's shape by
/// the broadcasting rules above, or by matmul batch broadcasting).
Tensor reduce_to_shape(const Tensor& g, const Shape& target_shape);

/// Active tape when any listed tensor requires grad, else nullptr.
Tape* grad_context(std::initializer_list<const Tensor*> ins);

std::vector<int64_t> strides_of(const Shape& s);

}  // namespace stv::ops

#endif  // STV_OPS_HPP_
