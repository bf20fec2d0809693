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

#ifndef STV_NN_HPP_
#define STV_NN_HPP_

#include <array>
#include <map>
#include <string>

#include "stv/ops.hpp"
#include "stv/tensor.hpp"

namespace stv::nn {

/// Named parameter tensors, hierarchical dot-separated names. std::map keeps
/// iteration sorted by name, which fixes serialization and update order.
using ParamStore = std::map<std::string, Tensor>;

/// Total element count across the store.
int64_t param_count(const ParamStore& params);

/// Lookup that throws ConfigError instead of inserting on a missing name.
const Tensor& param(const ParamStore& params, const std::string& name);

/// Per-layer hyperparameters used while assembling a network.
struct LayerSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int heads = 1;
  int64_t hidden = 0;
  double negative_slope = 0.01;

  void validate() const;
};

/// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_fan_in_uniform(Shape shape, int64_t fan_in, Rng& rng, Dtype dt);

/// 3D cross-correlation (no kernel flip) over volumes [N,C,H,W,D] with a
/// cubic kernel, uniform stride and zero padding.
/// Output extent per axis: floor((in + 2*padding - kernel)/stride) + 1.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

enum class Resample { nearest, trilinear };

/// Factor-2 spatial upsampling of [N,C,H,W,D]. Trilinear interpolation uses
/// the align-corners-false convention: source coordinate of output index o is
/// (o + 0.5) * in/out - 0.5, edge-clamped.
Tensor upsample(const Tensor& x, Resample mode, int factor);

/// General target-size resampling (same conventions); used where a level has
/// to restore an odd grid extent that factor-2 upsampling cannot reach.
Tensor resize3d(const Tensor& x, Resample mode, std::array<int64_t, 3> size);

/// Per-(sample, channel) normalization over the spatial voxels with
/// population variance, then gamma/beta affine. With eps > 0 a constant (or
/// single-voxel, when allowed) slab normalizes to zero pre-affine.
Tensor instance_norm3d(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps,
                       bool allow_single_voxel = false);

/// Per-token normalization over the last axis, same contract as
/// instance_norm3d otherwise.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);

/// y = x . weight^T + bias over the last axis; weight is [out, in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct MhaParams {
  Tensor wq, bq;
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wo, bo;
};

/// Multi-head scaled dot-product self-attention over [N, tokens, d].
/// Reductions along the token axis use value-sorted accumulation, so the op
/// is exactly permutation-equivariant over tokens.
Tensor multi_head_attention(const Tensor& x, const MhaParams& p, int heads);

struct FfnParams {
  Tensor w1, b1;
  Tensor w2, b2;
};

enum class Activation { gelu, relu, leaky_relu };

/// Tokenwise linear(d->m) -> activation -> linear(m->d).
Tensor feed_forward(const Tensor& x, const FfnParams& p,
                    Activation act = Activation::gelu, double slope = 0.01);

}  // namespace stv::nn

#endif  // STV_NN_HPP_
