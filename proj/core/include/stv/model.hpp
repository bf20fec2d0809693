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

#ifndef STV_MODEL_HPP_
#define STV_MODEL_HPP_

#include <array>
#include <string>
#include <tuple>
#include <vector>

#include "stv/nn.hpp"
#include "stv/rng.hpp"
#include "stv/tensor.hpp"

namespace stv {

/// Which feature map feeds the VAE branch: the transformer endpoint Z
/// (default) or the CNN encoder endpoint F. Both live on the /8 grid with K
/// channels, so the branch parameters are shared between the two choices.
enum class VaeAttach : uint8_t { transformer_endpoint = 0, encoder_endpoint = 1 };

/// All architecture hyperparameters; the single source of truth for shapes.
struct ModelConfig {
  int64_t in_channels = 4;
  int64_t out_channels = 3;
  int64_t base_filters = 4;
  std::array<int64_t, 4> blocks_per_level{1, 1, 1, 1};
  int64_t embed_dim = 64;  // transformer width d
  int64_t num_layers = 2;  // transformer depth L
  int64_t num_heads = 4;
  int64_t ffn_width = 128;
  int64_t latent_total = 256;  // mean + log-variance
  int64_t mean_dims = 128;
  std::array<int64_t, 3> patch_size{16, 16, 16};
  double leaky_slope = 0.01;
  uint64_t seed = 1;
  Dtype dtype = Dtype::f32;
  VaeAttach vae_attach = VaeAttach::transformer_endpoint;

  /// Encoder endpoint channels K = 8 * base_filters.
  int64_t encoder_channels() const { return base_filters * 8; }
  /// Token count N = (H/8)(W/8)(D/8).
  int64_t token_count() const {
    return (patch_size[0] / 8) * (patch_size[1] / 8) * (patch_size[2] / 8);
  }

  void validate() const;

  /// Small CPU-friendly configuration used throughout the tests.
  static ModelConfig desk();
  /// Full-scale configuration (b=16, blocks 1/2/2/4, d=512, L=4, heads=8,
  /// ffn=1024, 128^3 patches).
  static ModelConfig full_scale();
};

struct ForwardOutput {
  Tensor segmentation;   // [N, out_channels, H, W, D], strictly in (0,1)
  Tensor reconstruction; // [N, in_channels, H, W, D], linear output
  Tensor mu;             // [N, mean_dims]
  Tensor logvar;         // [N, mean_dims], clamped to [-10, 10]
};

/// One parameterized (or compute-heavy) unit of the network, with its exact
/// parameter count and closed-form forward FLOPs at batch 1. FLOPs count a
/// multiply-accumulate as 2 and cover convolutions, linear maps and the two
/// attention matrix products; normalizations and activations are excluded.
struct LayerInfo {
  enum class Kind { conv, linear, norm, position, attention };
  std::string name;
  Kind kind;
  int64_t params = 0;
  int64_t flops = 0;
};

struct ComplexityReport {
  int64_t parameter_count = 0;
  int64_t flops_forward = 0;
  double inference_seconds = 0.0;
};

/// SegTransVAE: modified-ResNet CNN encoder with skips, token embedding,
/// pre-norm transformer stack, feature mapping back onto the /8 grid, a
/// skip-connected segmentation decoder and a VAE reconstruction branch.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// CNN encoder: returns skip features at full, /2 and /4 resolution plus
  /// the /8 endpoint F with K channels.
  std::pair<std::array<Tensor, 3>, Tensor> encoder_forward(
      const Tensor& x) const;

  /// Tokens: per-position linear K->d plus learned position embeddings.
  Tensor feature_embedding(const Tensor& feat) const;

  /// Pre-norm residual transformer stack.
  Tensor transformer_forward(const Tensor& z0) const;

  /// Tokens back onto the /8 grid; 1x1x1 conv d->K, instance norm, LReLU.
  Tensor feature_mapping(const Tensor& z_last) const;

  /// Decoder over three levels (upsize, concat skip, fuse, residual block),
  /// then 1x1x1 conv to out_channels and sigmoid.
  Tensor decoder_forward(const Tensor& z_map,
                         const std::array<Tensor, 3>& skips) const;

  /// VAE branch: stride-2 reduction to a 256-dim latent (mean | log-var),
  /// reparameterized sample (rng required when sample), then a decoder-like
  /// reconstruction path without skips. Returns (reconstruction, mu, logvar).
  std::tuple<Tensor, Tensor, Tensor> vae_forward(const Tensor& z_map, Rng* rng,
                                                 bool sample) const;

  /// Residual unit: x + Conv(LReLU(IN(Conv(LReLU(IN(x)))))).
  Tensor modified_resnet_block(const Tensor& x,
                               const std::string& prefix) const;

  ForwardOutput forward(const Tensor& x, Rng& rng, bool training) const;

  const std::vector<LayerInfo>& architecture() const { return arch_; }
  std::string describe_architecture() const;

 private:
  const Tensor& p(const std::string& name) const {
    return nn::param(params_, name);
  }
  void build(Rng& rng);
  void add_conv(const std::string& name, int64_t cin, int64_t cout, int k,
                int64_t out_voxels, Rng& rng);
  void add_linear(const std::string& name, int64_t in, int64_t out,
                  int64_t rows, Rng& rng);
  void add_norm(const std::string& name, int64_t width);
  void add_block(const std::string& prefix, int64_t channels,
                 int64_t voxels, Rng& rng);
  Tensor conv(const Tensor& x, const std::string& name, int stride,
              int padding) const;

  ModelConfig cfg_;
  nn::ParamStore params_;
  std::vector<LayerInfo> arch_;
};

/// Parameter count from the store, closed-form forward FLOPs, and measured
/// mean wall time of `repetitions` deterministic forward passes at batch 1.
ComplexityReport complexity_report(const ModelConfig& config, int repetitions);

}  // namespace stv

#endif  // STV_MODEL_HPP_
