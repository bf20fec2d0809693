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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "stv/gradcheck.hpp"
#include "stv/nn.hpp"
#include "stv/ops.hpp"
#include "stv/tape.hpp"

using namespace stv;

namespace {

// Direct six-nested-loop cross-correlation; the independent oracle conv3d is
// checked against.
Tensor conv3d_bruteforce(const Tensor& x, const Tensor& w, const Tensor& bias,
                         int stride, int padding) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3),
                d = x.dim(4);
  const int64_t co = w.dim(0), k = w.dim(2);
  const int64_t ho = (h + 2 * padding - k) / stride + 1;
  const int64_t wo = (ww + 2 * padding - k) / stride + 1;
  const int64_t dd = (d + 2 * padding - k) / stride + 1;
  Tensor out = Tensor::zeros({n, co, ho, wo, dd}, x.dtype());
  for (int64_t in = 0; in < n; ++in) {
    for (int64_t oc = 0; oc < co; ++oc) {
      for (int64_t oh = 0; oh < ho; ++oh) {
        for (int64_t ow = 0; ow < wo; ++ow) {
          for (int64_t od = 0; od < dd; ++od) {
            double acc = bias.defined() ? bias.value_at(oc) : 0.0;
            for (int64_t ic = 0; ic < ci; ++ic) {
              for (int64_t kh = 0; kh < k; ++kh) {
                for (int64_t kw = 0; kw < k; ++kw) {
                  for (int64_t kd = 0; kd < k; ++kd) {
                    const int64_t ih = oh * stride + kh - padding;
                    const int64_t iw = ow * stride + kw - padding;
                    const int64_t id = od * stride + kd - padding;
                    if (ih < 0 || ih >= h || iw < 0 || iw >= ww || id < 0 ||
                        id >= d) {
                      continue;
                    }
                    const double xv = x.value_at(
                        (((in * ci + ic) * h + ih) * ww + iw) * d + id);
                    const double wv = w.value_at(
                        (((oc * ci + ic) * k + kh) * k + kw) * k + kd);
                    acc += xv * wv;
                  }
                }
              }
            }
            const int64_t off =
                (((in * co + oc) * ho + oh) * wo + ow) * dd + od;
            if (out.dtype() == Dtype::f64) {
              out.mut<double>()[static_cast<size_t>(off)] = acc;
            } else {
              out.mut<float>()[static_cast<size_t>(off)] =
                  static_cast<float>(acc);
            }
          }
        }
      }
    }
  }
  return out;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.value_at(i), y = b.value_at(i);
    const double denom = std::max({std::abs(x), std::abs(y), 1e-12});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

Tensor t64(Shape shape, std::vector<double> vals) {
  return Tensor::from_values(std::move(shape), vals, Dtype::f64);
}

// Align-corners-false linear resampling along one axis, closed form.
double axis_lerp(const std::vector<double>& src, int64_t out_len, int64_t o) {
  const int64_t in_len = static_cast<int64_t>(src.size());
  const double pos =
      (static_cast<double>(o) + 0.5) * static_cast<double>(in_len) /
          static_cast<double>(out_len) -
      0.5;
  if (pos <= 0) return src.front();
  if (pos >= static_cast<double>(in_len - 1)) return src.back();
  const int64_t i0 = static_cast<int64_t>(std::floor(pos));
  const double t = pos - static_cast<double>(i0);
  return (1.0 - t) * src[static_cast<size_t>(i0)] +
         t * src[static_cast<size_t>(i0 + 1)];
}

}  // namespace

TEST_CASE("conv3d with 1x1x1 identity kernel is the identity") {
  Rng rng(2);
  const int64_t c = 3;
  Tensor x = Tensor::uniform({1, c, 4, 4, 4}, -1, 1, rng, Dtype::f64);
  Tensor w = Tensor::zeros({c, c, 1, 1, 1}, Dtype::f64);
  for (int64_t i = 0; i < c; ++i) {
    w.mut<double>()[static_cast<size_t>(i * c + i)] = 1.0;
  }
  Tensor y = nn::conv3d(x, w, Tensor(), 1, 0);
  CHECK(max_rel_diff(x, y) == 0.0);
}

TEST_CASE("stride-2 3x3x3 conv with padding 1 halves a 16^3 volume") {
  Rng rng(3);
  Tensor x = Tensor::uniform({1, 2, 16, 16, 16}, -1, 1, rng, Dtype::f32);
  Tensor w = Tensor::uniform({4, 2, 3, 3, 3}, -0.3, 0.3, rng, Dtype::f32);
  Tensor y = nn::conv3d(x, w, Tensor(), 2, 1);
  CHECK(y.shape() == Shape{1, 4, 8, 8, 8});
}

TEST_CASE("conv3d matches the nested-loop oracle") {
  Rng rng(5);
  Tensor x = Tensor::uniform({1, 2, 5, 5, 5}, -1, 1, rng, Dtype::f64);
  Tensor w = Tensor::uniform({3, 2, 3, 3, 3}, -1, 1, rng, Dtype::f64);
  Tensor b = Tensor::uniform({3}, -1, 1, rng, Dtype::f64);
  Tensor got = nn::conv3d(x, w, b, 1, 1);
  Tensor want = conv3d_bruteforce(x, w, b, 1, 1);
  CHECK(max_rel_diff(got, want) < 1e-12);
}

TEST_CASE("conv3d random-instance oracle sweep") {
  Rng rng(7);
  for (int inst = 0; inst < 50; ++inst) {
    const int64_t n = 1 + static_cast<int64_t>(rng.below(2));
    const int64_t ci = 1 + static_cast<int64_t>(rng.below(3));
    const int64_t co = 1 + static_cast<int64_t>(rng.below(3));
    const int k = rng.below(2) == 0 ? 1 : 3;
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int padding = static_cast<int>(rng.below(2));
    const int64_t ext = std::max<int64_t>(
        k - 2 * padding, 2 + static_cast<int64_t>(rng.below(5)));
    Tensor x = Tensor::uniform({n, ci, ext, ext, ext}, -2, 2, rng, Dtype::f32);
    Tensor w = Tensor::uniform({co, ci, k, k, k}, -1, 1, rng, Dtype::f32);
    Tensor b = Tensor::uniform({co}, -1, 1, rng, Dtype::f32);
    Tensor got = nn::conv3d(x, w, b, stride, padding);
    Tensor want = conv3d_bruteforce(x, w, b, stride, padding);
    CHECK(max_rel_diff(got, want) < 1e-5);
  }
}

TEST_CASE("conv3d rejects kernels larger than the padded input") {
  Rng rng(8);
  Tensor x = Tensor::uniform({1, 1, 2, 2, 2}, -1, 1, rng, Dtype::f32);
  Tensor w = Tensor::uniform({1, 1, 3, 3, 3}, -1, 1, rng, Dtype::f32);
  CHECK_THROWS_AS(nn::conv3d(x, w, Tensor(), 1, 0), ShapeError);
}

TEST_CASE("upsample keeps constant volumes constant") {
  Tensor x = Tensor::full({1, 2, 3, 3, 3}, 4.25, Dtype::f64);
  for (auto mode : {nn::Resample::nearest, nn::Resample::trilinear}) {
    Tensor y = nn::upsample(x, mode, 2);
    CHECK(y.shape() == Shape{1, 2, 6, 6, 6});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.value_at(i) == 4.25);
  }
}

TEST_CASE("nearest upsampling replicates voxels") {
  Tensor x = t64({1, 1, 1, 1, 2}, {1.0, 2.0});
  Tensor y = nn::upsample(x, nn::Resample::nearest, 2);
  CHECK(y.shape() == Shape{1, 1, 2, 2, 4});
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.value_at(i) == (i % 4 < 2 ? 1.0 : 2.0));
  }
  CHECK_THROWS_AS(nn::upsample(x, nn::Resample::nearest, 3), ContractError);
}

TEST_CASE("trilinear upsampling matches the closed-form interpolation") {
  // 2^3 ramp, value = h + 10*w + 100*d; separable so the oracle composes the
  // 1D rule per axis.
  std::vector<double> vals;
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int d = 0; d < 2; ++d)
        vals.push_back(h + 10.0 * w + 100.0 * d);
  Tensor x = t64({1, 1, 2, 2, 2}, vals);
  Tensor y = nn::upsample(x, nn::Resample::trilinear, 2);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4, 4});
  const std::vector<double> axis = {0.0, 1.0};
  for (int64_t oh = 0; oh < 4; ++oh) {
    for (int64_t ow = 0; ow < 4; ++ow) {
      for (int64_t od = 0; od < 4; ++od) {
        const double want = axis_lerp(axis, 4, oh) +
                            10.0 * axis_lerp(axis, 4, ow) +
                            100.0 * axis_lerp(axis, 4, od);
        CHECK(y.value_at((oh * 4 + ow) * 4 + od) ==
              doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("instance norm hand example with population variance") {
  Tensor x = t64({1, 1, 1, 1, 4}, {1, 2, 3, 4});
  Tensor gamma = t64({1}, {1});
  Tensor beta = t64({1}, {0});
  Tensor y = nn::instance_norm3d(x, gamma, beta, 0.0);
  const double expect[4] = {-1.3416407865, -0.4472135955, 0.4472135955,
                            1.3416407865};
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(y.value_at(i) == doctest::Approx(expect[i]).epsilon(1e-9));
  }
}

TEST_CASE("instance norm properties on random inputs") {
  Rng rng(13);
  Tensor x = Tensor::uniform({2, 3, 4, 4, 4}, -5, 5, rng, Dtype::f64);
  Tensor gamma = Tensor::full({3}, 1.0, Dtype::f64);
  Tensor beta = Tensor::zeros({3}, Dtype::f64);
  Tensor y = nn::instance_norm3d(x, gamma, beta, 1e-5);
  const int64_t span = 64;
  for (int64_t g = 0; g < 6; ++g) {
    double mean = 0, var = 0;
    for (int64_t i = 0; i < span; ++i) mean += y.value_at(g * span + i);
    mean /= span;
    for (int64_t i = 0; i < span; ++i) {
      const double d = y.value_at(g * span + i) - mean;
      var += d * d;
    }
    var /= span;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }

  // Constant input: eps floor keeps the output at zero pre-affine.
  Tensor c = Tensor::full({1, 1, 2, 2, 2}, 3.0, Dtype::f64);
  Tensor yc = nn::instance_norm3d(c, t64({1}, {1}), t64({1}, {0}), 1e-5);
  for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc.value_at(i) == 0.0);

  // Degenerate single-voxel slab: rejected unless explicitly allowed.
  Tensor one = Tensor::full({1, 1, 1, 1, 1}, 3.0, Dtype::f64);
  CHECK_THROWS_AS(nn::instance_norm3d(one, t64({1}, {1}), t64({1}, {0}), 1e-5),
                  ShapeError);
  Tensor y1 =
      nn::instance_norm3d(one, t64({1}, {2}), t64({1}, {0.5}), 1e-5, true);
  CHECK(y1.value_at(0) == 0.5);
}

TEST_CASE("layer norm examples") {
  Tensor gamma = Tensor::full({3}, 1.0, Dtype::f64);
  Tensor beta = Tensor::zeros({3}, Dtype::f64);
  Tensor y = nn::layer_norm(t64({1, 3}, {2, 4, 6}), gamma, beta, 0.0);
  CHECK(y.value_at(0) == doctest::Approx(-1.2247448714).epsilon(1e-9));
  CHECK(y.value_at(1) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(y.value_at(2) == doctest::Approx(1.2247448714).epsilon(1e-9));

  // Shift invariance pre-affine.
  Rng rng(15);
  Tensor x = Tensor::uniform({4, 6}, -2, 2, rng, Dtype::f64);
  Tensor gamma6 = Tensor::full({6}, 1.0, Dtype::f64);
  Tensor beta6 = Tensor::zeros({6}, Dtype::f64);
  Tensor a = nn::layer_norm(x, gamma6, beta6, 1e-5);
  Tensor b = nn::layer_norm(ops::shift(x, 7.5), gamma6, beta6, 1e-5);
  CHECK(max_rel_diff(a, b) < 1e-9);

  // Per-token mean ~ 0.
  for (int64_t t = 0; t < 4; ++t) {
    double mean = 0;
    for (int64_t j = 0; j < 6; ++j) mean += a.value_at(t * 6 + j);
    CHECK(std::abs(mean / 6.0) < 1e-5);
  }
}

TEST_CASE("linear layer examples") {
  {
    Tensor w = t64({2, 2}, {1, 0, 0, 1});
    Tensor x = t64({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor y = nn::linear(x, w, Tensor::zeros({2}, Dtype::f64));
    CHECK(max_rel_diff(x, y) == 0.0);
  }
  {
    Tensor y = nn::linear(t64({2}, {1, 1}), t64({1, 2}, {2, 3}),
                          t64({1}, {1}));
    CHECK(y.value_at(0) == doctest::Approx(6.0).epsilon(1e-12));
  }
  {
    Rng rng(19);
    Tensor x = Tensor::uniform({2, 3, 4, 5}, -1, 1, rng, Dtype::f64);
    Tensor w = Tensor::uniform({7, 5}, -1, 1, rng, Dtype::f64);
    Tensor y = nn::linear(x, w, Tensor::uniform({7}, -1, 1, rng, Dtype::f64));
    CHECK(y.shape() == Shape{2, 3, 4, 7});
  }
}

namespace {

nn::MhaParams random_mha(int64_t d, Rng& rng, Dtype dt) {
  nn::MhaParams p;
  p.wq = Tensor::uniform({d, d}, -0.5, 0.5, rng, dt);
  p.bq = Tensor::uniform({d}, -0.1, 0.1, rng, dt);
  p.wk = Tensor::uniform({d, d}, -0.5, 0.5, rng, dt);
  p.bk = Tensor::uniform({d}, -0.1, 0.1, rng, dt);
  p.wv = Tensor::uniform({d, d}, -0.5, 0.5, rng, dt);
  p.bv = Tensor::uniform({d}, -0.1, 0.1, rng, dt);
  p.wo = Tensor::uniform({d, d}, -0.5, 0.5, rng, dt);
  p.bo = Tensor::uniform({d}, -0.1, 0.1, rng, dt);
  return p;
}

}  // namespace

TEST_CASE("single-token attention is the value path") {
  Rng rng(23);
  const int64_t d = 4;
  nn::MhaParams p = random_mha(d, rng, Dtype::f64);
  Tensor x = Tensor::uniform({1, 1, d}, -1, 1, rng, Dtype::f64);
  Tensor y = nn::multi_head_attention(x, p, 2);
  // Attention over one token weights it 1: output = Wo(Wv x + bv) + bo.
  Tensor v = nn::linear(x, p.wv, p.bv);
  Tensor want = nn::linear(v, p.wo, p.bo);
  CHECK(max_rel_diff(y, want) < 1e-12);
}

TEST_CASE("attention is exactly permutation-equivariant over tokens") {
  Rng rng(27);
  const int64_t d = 8, tokens = 6;
  nn::MhaParams p = random_mha(d, rng, Dtype::f64);
  Tensor x = Tensor::uniform({2, tokens, d}, -1, 1, rng, Dtype::f64);
  Tensor y = nn::multi_head_attention(x, p, 4);

  const std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor xp = Tensor::zeros({2, tokens, d}, Dtype::f64);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t t = 0; t < tokens; ++t)
      for (int64_t j = 0; j < d; ++j)
        xp.mut<double>()[static_cast<size_t>((n * tokens + t) * d + j)] =
            x.value_at((n * tokens + perm[static_cast<size_t>(t)]) * d + j);
  Tensor yp = nn::multi_head_attention(xp, p, 4);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t t = 0; t < tokens; ++t)
      for (int64_t j = 0; j < d; ++j)
        CHECK(yp.value_at((n * tokens + t) * d + j) ==
              y.value_at((n * tokens + perm[static_cast<size_t>(t)]) * d + j));
}

TEST_CASE("two-token one-head attention matches the scalar oracle") {
  // d = 1, heads = 1: everything reduces to scalar arithmetic.
  Tensor x = t64({1, 2, 1}, {0.7, -0.4});
  nn::MhaParams p;
  p.wq = t64({1, 1}, {1.3});
  p.bq = t64({1}, {0.1});
  p.wk = t64({1, 1}, {-0.8});
  p.bk = t64({1}, {0.2});
  p.wv = t64({1, 1}, {0.9});
  p.bv = t64({1}, {-0.3});
  p.wo = t64({1, 1}, {1.1});
  p.bo = t64({1}, {0.05});
  Tensor y = nn::multi_head_attention(x, p, 1);

  const double xs[2] = {0.7, -0.4};
  double q[2], k[2], v[2];
  for (int i = 0; i < 2; ++i) {
    q[i] = 1.3 * xs[i] + 0.1;
    k[i] = -0.8 * xs[i] + 0.2;
    v[i] = 0.9 * xs[i] - 0.3;
  }
  for (int i = 0; i < 2; ++i) {
    const double s0 = q[i] * k[0], s1 = q[i] * k[1];  // sqrt(d_k) = 1
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    const double ctx = a0 * v[0] + a1 * v[1];
    const double want = 1.1 * ctx + 0.05;
    CHECK(y.value_at(i) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("attention rejects head counts that do not divide d") {
  Rng rng(31);
  nn::MhaParams p = random_mha(6, rng, Dtype::f64);
  Tensor x = Tensor::uniform({1, 3, 6}, -1, 1, rng, Dtype::f64);
  CHECK_THROWS_AS(nn::multi_head_attention(x, p, 4), ConfigError);
}

TEST_CASE("feed-forward examples") {
  {
    nn::FfnParams p;
    p.w1 = Tensor::zeros({4, 3}, Dtype::f64);
    p.b1 = Tensor::zeros({4}, Dtype::f64);
    p.w2 = Tensor::zeros({3, 4}, Dtype::f64);
    p.b2 = Tensor::zeros({3}, Dtype::f64);
    Rng rng(33);
    Tensor x = Tensor::uniform({1, 2, 3}, -1, 1, rng, Dtype::f64);
    Tensor y = nn::feed_forward(x, p);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.value_at(i) == 0.0);
  }
  {
    // Tokenwise locality: each output token depends only on its input token.
    Rng rng(35);
    nn::FfnParams p;
    p.w1 = Tensor::uniform({5, 3}, -1, 1, rng, Dtype::f64);
    p.b1 = Tensor::uniform({5}, -1, 1, rng, Dtype::f64);
    p.w2 = Tensor::uniform({3, 5}, -1, 1, rng, Dtype::f64);
    p.b2 = Tensor::uniform({3}, -1, 1, rng, Dtype::f64);
    Tensor x = Tensor::uniform({1, 4, 3}, -1, 1, rng, Dtype::f64);
    Tensor y = nn::feed_forward(x, p);
    Tensor x2 = x.clone();
    for (int64_t j = 0; j < 3; ++j) {
      x2.mut<double>()[static_cast<size_t>(2 * 3 + j)] += 1.0;  // token 2 only
    }
    Tensor y2 = nn::feed_forward(x2, p);
    for (int64_t t = 0; t < 4; ++t) {
      for (int64_t j = 0; j < 3; ++j) {
        const bool changed =
            y.value_at(t * 3 + j) != y2.value_at(t * 3 + j);
        CHECK(changed == (t == 2));
      }
    }
  }
  {
    // Hand-computed 1 -> 2 -> 1 with GELU, evaluated via the closed form.
    nn::FfnParams p;
    p.w1 = t64({2, 1}, {1.0, -2.0});
    p.b1 = t64({2}, {0.5, 0.25});
    p.w2 = t64({1, 2}, {1.5, -1.0});
    p.b2 = t64({1}, {0.1});
    Tensor x = t64({1, 1, 1}, {0.3});
    Tensor y = nn::feed_forward(x, p);
    auto gelu = [](double v) {
      return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    };
    const double h0 = gelu(1.0 * 0.3 + 0.5);
    const double h1 = gelu(-2.0 * 0.3 + 0.25);
    const double want = 1.5 * h0 - 1.0 * h1 + 0.1;
    CHECK(y.item() == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("layer gradients are finite and match finite differences") {
  Rng rng(39);

  // conv3d wrt input, weight and bias.
  {
    Tensor x = Tensor::uniform({1, 2, 4, 4, 4}, -1, 1, rng, Dtype::f64);
    Tensor w = Tensor::uniform({3, 2, 3, 3, 3}, -0.6, 0.6, rng, Dtype::f64);
    Tensor b = Tensor::uniform({3}, -0.4, 0.4, rng, Dtype::f64);
    Tensor cx = Tensor::uniform({1, 3, 4, 4, 4}, -1, 1, rng, Dtype::f64);
    auto weigh = [cx](const Tensor& y) {
      return ops::reduce_sum(ops::mul(y, cx), {0, 1, 2, 3, 4});
    };
    CHECK(finite_diff_check(
              [&](const Tensor& p) { return weigh(nn::conv3d(p, w, b, 1, 1)); },
              x, 1e-5) < 1e-6);
    CHECK(finite_diff_check(
              [&](const Tensor& p) { return weigh(nn::conv3d(x, p, b, 1, 1)); },
              w, 1e-5) < 1e-6);
    CHECK(finite_diff_check(
              [&](const Tensor& p) { return weigh(nn::conv3d(x, w, p, 1, 1)); },
              b, 1e-5) < 1e-6);
  }

  // trilinear resize, odd target size included.
  {
    Tensor x = Tensor::uniform({1, 2, 2, 3, 2}, -1, 1, rng, Dtype::f64);
    Tensor cx = Tensor::uniform({1, 2, 4, 3, 4}, -1, 1, rng, Dtype::f64);
    CHECK(finite_diff_check(
              [&](const Tensor& p) {
                Tensor y = nn::resize3d(p, nn::Resample::trilinear, {4, 3, 4});
                return ops::reduce_sum(ops::mul(y, cx), {0, 1, 2, 3, 4});
              },
              x, 1e-5) < 1e-6);
  }

  // norms wrt every parameter slot.
  {
    Tensor x = Tensor::uniform({2, 2, 3, 3, 3}, -1, 1, rng, Dtype::f64);
    Tensor gamma = Tensor::uniform({2}, 0.5, 1.5, rng, Dtype::f64);
    Tensor beta = Tensor::uniform({2}, -0.5, 0.5, rng, Dtype::f64);
    Tensor cx = Tensor::uniform(x.shape(), -1, 1, rng, Dtype::f64);
    auto weigh = [cx](const Tensor& y) {
      return ops::reduce_sum(ops::mul(y, cx), {0, 1, 2, 3, 4});
    };
    CHECK(finite_diff_check(
              [&](const Tensor& p) {
                return weigh(nn::instance_norm3d(p, gamma, beta, 1e-5));
              },
              x, 1e-5) < 1e-6);
    CHECK(finite_diff_check(
              [&](const Tensor& p) {
                return weigh(nn::instance_norm3d(x, p, beta, 1e-5));
              },
              gamma, 1e-5) < 1e-6);
    CHECK(finite_diff_check(
              [&](const Tensor& p) {
                return weigh(nn::instance_norm3d(x, gamma, p, 1e-5));
              },
              beta, 1e-5) < 1e-6);
  }
  {
    Tensor x = Tensor::uniform({3, 5}, -1, 1, rng, Dtype::f64);
    Tensor gamma = Tensor::uniform({5}, 0.5, 1.5, rng, Dtype::f64);
    Tensor beta = Tensor::uniform({5}, -0.5, 0.5, rng, Dtype::f64);
    Tensor cx = Tensor::uniform(x.shape(), -1, 1, rng, Dtype::f64);
    CHECK(finite_diff_check(
              [&](const Tensor& p) {
                Tensor y = nn::layer_norm(p, gamma, beta, 1e-5);
                return ops::reduce_sum(ops::mul(y, cx), {0, 1});
              },
              x, 1e-5) < 1e-6);
  }

  // attention and feed-forward wrt input; all parameters get finite grads.
  {
    const int64_t d = 6;
    nn::MhaParams p = random_mha(d, rng, Dtype::f64);
    Tensor x = Tensor::uniform({1, 4, d}, -1, 1, rng, Dtype::f64);
    Tensor cx = Tensor::uniform(x.shape(), -1, 1, rng, Dtype::f64);
    CHECK(finite_diff_check(
              [&](const Tensor& q) {
                Tensor y = nn::multi_head_attention(q, p, 3);
                return ops::reduce_sum(ops::mul(y, cx), {0, 1, 2});
              },
              x, 1e-5) < 1e-6);
    CHECK(finite_diff_check(
              [&](const Tensor& q) {
                nn::MhaParams pp = p;
                pp.wo = q;
                Tensor y = nn::multi_head_attention(x, pp, 3);
                return ops::reduce_sum(ops::mul(y, cx), {0, 1, 2});
              },
              p.wo, 1e-5) < 1e-6);

    Tape tape;
    TapeScope scope(tape);
    Tensor xg = x.clone();
    xg.set_requires_grad(true);
    for (Tensor* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo})
      t->set_requires_grad(true);
    Tensor y = nn::multi_head_attention(xg, p, 3);
    tape.backward(ops::reduce_sum(ops::mul(y, cx), {0, 1, 2}));
    for (Tensor* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo}) {
      Tensor g = tape.grad_or_zero(*t);
      CHECK(g.all_finite());
    }
  }
}
