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

#include "stv/model.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "stv/tape.hpp"

namespace stv {

namespace {

// Output extent of the stride-2 3^3 padding-1 reduction conv: ceil(m/2).
int64_t half_up(int64_t m) { return (m + 1) / 2; }

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1 || out_channels < 1 || base_filters < 1 ||
      embed_dim < 1 || num_layers < 1 || num_heads < 1 || ffn_width < 1 ||
      mean_dims < 1) {
    throw ConfigError("ModelConfig: all extents must be positive");
  }
  for (int64_t b : blocks_per_level) {
    if (b < 1) throw ConfigError("ModelConfig: blocks_per_level must be >= 1");
  }
  for (int64_t e : patch_size) {
    if (e < 8 || e % 8 != 0) {
      throw ConfigError("ModelConfig: patch extents must be multiples of 8, "
                        "got " + std::to_string(e));
    }
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("ModelConfig: num_heads must divide embed_dim");
  }
  if (latent_total != 2 * mean_dims) {
    throw ConfigError("ModelConfig: latent_total must equal 2 * mean_dims");
  }
  if (encoder_channels() % 16 != 0) {
    throw ConfigError(
        "ModelConfig: base_filters must be even so the reconstruction path "
        "can halve channels four times");
  }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig cfg;
  cfg.in_channels = 4;
  cfg.out_channels = 3;
  cfg.base_filters = 16;
  cfg.blocks_per_level = {1, 2, 2, 4};
  cfg.embed_dim = 512;
  cfg.num_layers = 4;
  cfg.num_heads = 8;
  cfg.ffn_width = 1024;
  cfg.patch_size = {128, 128, 128};
  return cfg;
}

Model::Model(const ModelConfig& config) : cfg_(config) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  build(rng);
}

void Model::add_conv(const std::string& name, int64_t cin, int64_t cout, int k,
                     int64_t out_voxels, Rng& rng) {
  const int64_t fan_in = cin * k * k * k;
  params_[name + ".w"] = nn::init_fan_in_uniform({cout, cin, k, k, k}, fan_in,
                                                 rng, cfg_.dtype)
                             .set_requires_grad(true);
  params_[name + ".b"] =
      Tensor::zeros({cout}, cfg_.dtype).set_requires_grad(true);
  arch_.push_back(LayerInfo{name, LayerInfo::Kind::conv,
                            cout * fan_in + cout,
                            2 * cout * fan_in * out_voxels});
}

void Model::add_linear(const std::string& name, int64_t in, int64_t out,
                       int64_t rows, Rng& rng) {
  params_[name + ".w"] =
      nn::init_fan_in_uniform({out, in}, in, rng, cfg_.dtype)
          .set_requires_grad(true);
  params_[name + ".b"] =
      Tensor::zeros({out}, cfg_.dtype).set_requires_grad(true);
  arch_.push_back(LayerInfo{name, LayerInfo::Kind::linear, out * in + out,
                            2 * in * out * rows});
}

void Model::add_norm(const std::string& name, int64_t width) {
  params_[name + ".g"] =
      Tensor::full({width}, 1.0, cfg_.dtype).set_requires_grad(true);
  params_[name + ".b"] =
      Tensor::zeros({width}, cfg_.dtype).set_requires_grad(true);
  arch_.push_back(LayerInfo{name, LayerInfo::Kind::norm, 2 * width, 0});
}

void Model::add_block(const std::string& prefix, int64_t channels,
                      int64_t voxels, Rng& rng) {
  add_norm(prefix + ".in1", channels);
  add_conv(prefix + ".conv1", channels, channels, 3, voxels, rng);
  add_norm(prefix + ".in2", channels);
  add_conv(prefix + ".conv2", channels, channels, 3, voxels, rng);
}

void Model::build(Rng& rng) {
  const int64_t b = cfg_.base_filters;
  const int64_t K = cfg_.encoder_channels();
  const int64_t T = cfg_.token_count();
  const int64_t d = cfg_.embed_dim;

  // Voxel counts per level; level i lives at patch / 2^i.
  std::array<int64_t, 4> vox{};
  for (int i = 0; i < 4; ++i) {
    vox[static_cast<size_t>(i)] = (cfg_.patch_size[0] >> i) *
                                  (cfg_.patch_size[1] >> i) *
                                  (cfg_.patch_size[2] >> i);
  }
  const int64_t red_vox = half_up(cfg_.patch_size[0] / 8) *
                          half_up(cfg_.patch_size[1] / 8) *
                          half_up(cfg_.patch_size[2] / 8);

  add_conv("encoder.stem.conv", cfg_.in_channels, b, 3, vox[0], rng);
  for (int lvl = 0; lvl < 4; ++lvl) {
    const int64_t ch = b << lvl;
    for (int64_t blk = 0; blk < cfg_.blocks_per_level[static_cast<size_t>(lvl)];
         ++blk) {
      add_block("encoder.level" + std::to_string(lvl) + ".block" +
                    std::to_string(blk),
                ch, vox[static_cast<size_t>(lvl)], rng);
    }
    if (lvl < 3) {
      add_conv("encoder.down" + std::to_string(lvl), ch, ch * 2, 3,
               vox[static_cast<size_t>(lvl + 1)], rng);
    }
  }

  add_linear("embed.linear", K, d, T, rng);
  params_["embed.pe"] =
      Tensor::normal({T, d}, 0.0, 0.02, rng, cfg_.dtype).set_requires_grad(true);
  arch_.push_back(
      LayerInfo{"embed.pe", LayerInfo::Kind::position, T * d, 0});

  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string lp = "transformer.layer" + std::to_string(l);
    add_norm(lp + ".ln1", d);
    add_linear(lp + ".attn.q", d, d, T, rng);
    add_linear(lp + ".attn.k", d, d, T, rng);
    add_linear(lp + ".attn.v", d, d, T, rng);
    add_linear(lp + ".attn.o", d, d, T, rng);
    // Score and apply matrix products: 2*T^2*d FLOPs each.
    arch_.push_back(LayerInfo{lp + ".attn.core", LayerInfo::Kind::attention, 0,
                              4 * T * T * d});
    add_norm(lp + ".ln2", d);
    add_linear(lp + ".ffn.fc1", d, cfg_.ffn_width, T, rng);
    add_linear(lp + ".ffn.fc2", cfg_.ffn_width, d, T, rng);
  }

  add_conv("featmap.conv", d, K, 1, vox[3], rng);
  add_norm("featmap.in", K);

  for (int lvl = 2; lvl >= 0; --lvl) {
    const std::string dp = "decoder.level" + std::to_string(lvl);
    const int64_t w = b << lvl;
    add_conv(dp + ".up", 2 * w, w, 1, vox[static_cast<size_t>(lvl + 1)], rng);
    add_conv(dp + ".fuse", 2 * w, w, 1, vox[static_cast<size_t>(lvl)], rng);
    add_block(dp + ".block", w, vox[static_cast<size_t>(lvl)], rng);
  }
  add_conv("decoder.head", b, cfg_.out_channels, 1, vox[0], rng);

  // The reduction normalizes on the /8 grid before the strided conv; the
  // reduced grid can be a single voxel, where a norm would be constant.
  add_norm("vae.reduce.in", K);
  add_conv("vae.reduce.conv", K, K / 2, 3, red_vox, rng);
  add_linear("vae.latent", (K / 2) * red_vox, cfg_.latent_total, 1, rng);
  add_linear("vae.expand", cfg_.mean_dims, K * red_vox, 1, rng);
  for (int s = 1; s <= 4; ++s) {
    const std::string sp = "vae.stage" + std::to_string(s);
    const int64_t cin = K >> (s - 1);
    // Stage 1 convolves on the reduced grid and restores the /8 grid; later
    // stages double the grid they receive.
    const int64_t conv_vox = s == 1 ? red_vox : vox[static_cast<size_t>(5 - s)];
    add_conv(sp + ".conv", cin, cin / 2, 1, conv_vox, rng);
    add_block(sp + ".block", cin / 2, vox[static_cast<size_t>(4 - s)], rng);
  }
  add_conv("vae.head", K / 16, cfg_.in_channels, 1, vox[0], rng);
}

Tensor Model::conv(const Tensor& x, const std::string& name, int stride,
                   int padding) const {
  return nn::conv3d(x, p(name + ".w"), p(name + ".b"), stride, padding);
}

Tensor Model::modified_resnet_block(const Tensor& x,
                                    const std::string& prefix) const {
  Tensor h = nn::instance_norm3d(x, p(prefix + ".in1.g"), p(prefix + ".in1.b"),
                                 1e-5, true);
  h = ops::leaky_relu(h, cfg_.leaky_slope);
  h = conv(h, prefix + ".conv1", 1, 1);
  h = nn::instance_norm3d(h, p(prefix + ".in2.g"), p(prefix + ".in2.b"), 1e-5,
                          true);
  h = ops::leaky_relu(h, cfg_.leaky_slope);
  h = conv(h, prefix + ".conv2", 1, 1);
  return ops::add(x, h);
}

std::pair<std::array<Tensor, 3>, Tensor> Model::encoder_forward(
    const Tensor& x) const {
  if (x.rank() != 5 || x.dim(1) != cfg_.in_channels ||
      x.dim(2) != cfg_.patch_size[0] || x.dim(3) != cfg_.patch_size[1] ||
      x.dim(4) != cfg_.patch_size[2]) {
    throw ShapeError("encoder_forward: expected [N," +
                     std::to_string(cfg_.in_channels) + "," +
                     std::to_string(cfg_.patch_size[0]) + "," +
                     std::to_string(cfg_.patch_size[1]) + "," +
                     std::to_string(cfg_.patch_size[2]) + "], got " +
                     describe(x));
  }
  Tensor cur = conv(x, "encoder.stem.conv", 1, 1);
  std::array<Tensor, 3> skips;
  for (int lvl = 0; lvl < 4; ++lvl) {
    for (int64_t blk = 0; blk < cfg_.blocks_per_level[static_cast<size_t>(lvl)];
         ++blk) {
      cur = modified_resnet_block(cur, "encoder.level" + std::to_string(lvl) +
                                           ".block" + std::to_string(blk));
    }
    if (lvl < 3) {
      skips[static_cast<size_t>(lvl)] = cur;
      cur = conv(cur, "encoder.down" + std::to_string(lvl), 2, 1);
    }
  }
  return {skips, cur};
}

Tensor Model::feature_embedding(const Tensor& feat) const {
  const int64_t T = cfg_.token_count();
  if (feat.rank() != 5 || feat.dim(1) != cfg_.encoder_channels() ||
      feat.dim(2) * feat.dim(3) * feat.dim(4) != T) {
    throw ConfigError("feature_embedding: feature map " + describe(feat) +
                      " does not match the configured token grid");
  }
  const int64_t n = feat.dim(0);
  Tensor tokens = ops::reshape(ops::permute(feat, {0, 2, 3, 4, 1}),
                               {n, T, cfg_.encoder_channels()});
  Tensor z0 = nn::linear(tokens, p("embed.linear.w"), p("embed.linear.b"));
  return ops::add(z0, p("embed.pe"));
}

Tensor Model::transformer_forward(const Tensor& z0) const {
  Tensor z = z0;
  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string lp = "transformer.layer" + std::to_string(l);
    nn::MhaParams mha;
    mha.wq = p(lp + ".attn.q.w");
    mha.bq = p(lp + ".attn.q.b");
    mha.wk = p(lp + ".attn.k.w");
    mha.bk = p(lp + ".attn.k.b");
    mha.wv = p(lp + ".attn.v.w");
    mha.bv = p(lp + ".attn.v.b");
    mha.wo = p(lp + ".attn.o.w");
    mha.bo = p(lp + ".attn.o.b");
    Tensor normed = nn::layer_norm(z, p(lp + ".ln1.g"), p(lp + ".ln1.b"), 1e-5);
    Tensor zp = ops::add(
        nn::multi_head_attention(normed, mha, static_cast<int>(cfg_.num_heads)),
        z);
    nn::FfnParams ffn;
    ffn.w1 = p(lp + ".ffn.fc1.w");
    ffn.b1 = p(lp + ".ffn.fc1.b");
    ffn.w2 = p(lp + ".ffn.fc2.w");
    ffn.b2 = p(lp + ".ffn.fc2.b");
    Tensor normed2 =
        nn::layer_norm(zp, p(lp + ".ln2.g"), p(lp + ".ln2.b"), 1e-5);
    z = ops::add(nn::feed_forward(normed2, ffn, nn::Activation::gelu), zp);
  }
  return z;
}

Tensor Model::feature_mapping(const Tensor& z_last) const {
  const int64_t T = cfg_.token_count();
  if (z_last.rank() != 3 || z_last.dim(1) != T ||
      z_last.dim(2) != cfg_.embed_dim) {
    throw ShapeError("feature_mapping: expected [N," + std::to_string(T) +
                     "," + std::to_string(cfg_.embed_dim) + "], got " +
                     describe(z_last));
  }
  const int64_t n = z_last.dim(0);
  const int64_t h = cfg_.patch_size[0] / 8;
  const int64_t w = cfg_.patch_size[1] / 8;
  const int64_t dd = cfg_.patch_size[2] / 8;
  // Inverse of the embedding flattening order.
  Tensor grid = ops::permute(
      ops::reshape(z_last, {n, h, w, dd, cfg_.embed_dim}), {0, 4, 1, 2, 3});
  Tensor z_map = conv(grid, "featmap.conv", 1, 0);
  z_map = nn::instance_norm3d(z_map, p("featmap.in.g"), p("featmap.in.b"),
                              1e-5, true);
  return ops::leaky_relu(z_map, cfg_.leaky_slope);
}

Tensor Model::decoder_forward(const Tensor& z_map,
                              const std::array<Tensor, 3>& skips) const {
  Tensor cur = z_map;
  for (int lvl = 2; lvl >= 0; --lvl) {
    const std::string dp = "decoder.level" + std::to_string(lvl);
    cur = conv(cur, dp + ".up", 1, 0);
    cur = nn::upsample(cur, nn::Resample::trilinear, 2);
    const Tensor& skip = skips[static_cast<size_t>(lvl)];
    if (!skip.defined() || skip.dim(2) != cur.dim(2) ||
        skip.dim(3) != cur.dim(3) || skip.dim(4) != cur.dim(4)) {
      throw ShapeError("decoder_forward: skip " + std::to_string(lvl) +
                       " does not match the upsampled grid");
    }
    std::array<Tensor, 2> cat{cur, skip};
    cur = ops::concat(std::span<const Tensor>(cat.data(), 2), 1);
    cur = conv(cur, dp + ".fuse", 1, 0);
    cur = modified_resnet_block(cur, dp + ".block");
  }
  return ops::sigmoid(conv(cur, "decoder.head", 1, 0));
}

std::tuple<Tensor, Tensor, Tensor> Model::vae_forward(const Tensor& z_map,
                                                      Rng* rng,
                                                      bool sample) const {
  const int64_t n = z_map.dim(0);
  const int64_t K = cfg_.encoder_channels();
  const std::array<int64_t, 3> m{cfg_.patch_size[0] / 8,
                                 cfg_.patch_size[1] / 8,
                                 cfg_.patch_size[2] / 8};
  const std::array<int64_t, 3> r{half_up(m[0]), half_up(m[1]), half_up(m[2])};
  const int64_t red_vox = r[0] * r[1] * r[2];

  Tensor red = nn::instance_norm3d(z_map, p("vae.reduce.in.g"),
                                   p("vae.reduce.in.b"), 1e-5, true);
  red = ops::leaky_relu(red, cfg_.leaky_slope);
  red = conv(red, "vae.reduce.conv", 2, 1);
  Tensor flat = ops::reshape(red, {n, (K / 2) * red_vox});
  Tensor latent = nn::linear(flat, p("vae.latent.w"), p("vae.latent.b"));
  Tensor mu = ops::slice(latent, 1, 0, cfg_.mean_dims);
  Tensor logvar =
      ops::clamp(ops::slice(latent, 1, cfg_.mean_dims, cfg_.mean_dims),
                 -10.0, 10.0);

  Tensor z = mu;
  if (sample) {
    if (rng == nullptr) {
      throw ContractError("vae_forward: sampling requires an rng");
    }
    Tensor noise =
        Tensor::normal({n, cfg_.mean_dims}, 0.0, 1.0, *rng, z_map.dtype());
    Tensor sigma = ops::exp(ops::scale(logvar, 0.5));
    z = ops::add(mu, ops::mul(sigma, noise));
  }

  Tensor cur = nn::linear(z, p("vae.expand.w"), p("vae.expand.b"));
  cur = ops::reshape(cur, {n, K, r[0], r[1], r[2]});
  for (int s = 1; s <= 4; ++s) {
    const std::string sp = "vae.stage" + std::to_string(s);
    cur = conv(cur, sp + ".conv", 1, 0);
    if (s == 1) {
      cur = nn::resize3d(cur, nn::Resample::trilinear, m);
    } else {
      cur = nn::upsample(cur, nn::Resample::trilinear, 2);
    }
    cur = modified_resnet_block(cur, sp + ".block");
  }
  Tensor recon = conv(cur, "vae.head", 1, 0);
  return {recon, mu, logvar};
}

ForwardOutput Model::forward(const Tensor& x, Rng& rng, bool training) const {
  auto [skips, feat] = encoder_forward(x);
  Tensor z0 = feature_embedding(feat);
  Tensor z_last = transformer_forward(z0);
  Tensor z_map = feature_mapping(z_last);
  ForwardOutput out;
  out.segmentation = decoder_forward(z_map, skips);
  const Tensor& vae_src =
      cfg_.vae_attach == VaeAttach::transformer_endpoint ? z_map : feat;
  std::tie(out.reconstruction, out.mu, out.logvar) =
      vae_forward(vae_src, &rng, training);
  return out;
}

std::string Model::describe_architecture() const {
  std::ostringstream os;
  for (const LayerInfo& info : arch_) {
    const char* kind = "";
    switch (info.kind) {
      case LayerInfo::Kind::conv: kind = "conv"; break;
      case LayerInfo::Kind::linear: kind = "linear"; break;
      case LayerInfo::Kind::norm: kind = "norm"; break;
      case LayerInfo::Kind::position: kind = "position"; break;
      case LayerInfo::Kind::attention: kind = "attention"; break;
    }
    os << info.name << " " << kind << " params=" << info.params
       << " flops=" << info.flops << "\n";
  }
  return os.str();
}

ComplexityReport complexity_report(const ModelConfig& config,
                                   int repetitions) {
  if (repetitions < 1) {
    throw ContractError("complexity_report: repetitions must be >= 1");
  }
  Model model(config);
  ComplexityReport report;
  report.parameter_count = nn::param_count(model.params());
  for (const LayerInfo& info : model.architecture()) {
    report.flops_forward += info.flops;
  }

  Tensor x = Tensor::zeros({1, config.in_channels, config.patch_size[0],
                            config.patch_size[1], config.patch_size[2]},
                           config.dtype);
  Rng rng(config.seed);
  (void)model.forward(x, rng, false);  // warm-up
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < repetitions; ++i) {
    (void)model.forward(x, rng, false);
  }
  const auto stop = std::chrono::steady_clock::now();
  report.inference_seconds =
      std::chrono::duration<double>(stop - start).count() /
      static_cast<double>(repetitions);
  return report;
}

}  // namespace stv
