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

#include "stv/nn.hpp"

#include <algorithm>
#include <cmath>

#include "stv/parallel.hpp"
#include "stv/tape.hpp"

namespace stv::nn {

int64_t param_count(const ParamStore& params) {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

const Tensor& param(const ParamStore& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) {
    throw ConfigError("missing parameter '" + name + "'");
  }
  return it->second;
}

void LayerSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) {
    throw ConfigError("LayerSpec: channel counts must be positive");
  }
  if (kernel < 1 || stride < 1 || padding < 0 || heads < 1 || hidden < 0) {
    throw ConfigError("LayerSpec: extents must be positive");
  }
  if (out_channels % heads != 0) {
    throw ConfigError("LayerSpec: heads must divide the embedding width");
  }
}

Tensor init_fan_in_uniform(Shape shape, int64_t fan_in, Rng& rng, Dtype dt) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, dt);
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t n, ci, h, w, d;
  int64_t co, k;
  int64_t ho, wo, dow;
  int s, p;
};

// Valid output range [lo, hi) along one axis for a given kernel offset, such
// that the input index o*s + kz - p stays inside [0, in).
void axis_ranges(int64_t in, int64_t out, int64_t k, int s, int p,
                 std::vector<int64_t>& lo, std::vector<int64_t>& hi) {
  lo.resize(static_cast<size_t>(k));
  hi.resize(static_cast<size_t>(k));
  for (int64_t kz = 0; kz < k; ++kz) {
    const int64_t num = p - kz;
    int64_t l = num <= 0 ? 0 : (num + s - 1) / s;
    int64_t h = in - 1 + p - kz;
    h = h < 0 ? 0 : h / s + 1;
    if (h > out) h = out;
    if (l > h) l = h;
    lo[static_cast<size_t>(kz)] = l;
    hi[static_cast<size_t>(kz)] = h;
  }
}

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& bias,
                   int stride, int padding) {
  if (x.rank() != 5 || w.rank() != 5) {
    throw ShapeError("conv3d: expected x[N,C,H,W,D] and weight[Co,Ci,k,k,k], "
                     "got " + describe(x) + " and " + describe(w));
  }
  ConvDims dm{};
  dm.n = x.dim(0);
  dm.ci = x.dim(1);
  dm.h = x.dim(2);
  dm.w = x.dim(3);
  dm.d = x.dim(4);
  dm.co = w.dim(0);
  dm.k = w.dim(2);
  dm.s = stride;
  dm.p = padding;
  if (w.dim(1) != dm.ci) {
    throw ShapeError("conv3d: weight expects " + std::to_string(w.dim(1)) +
                     " input channels, got " + std::to_string(dm.ci));
  }
  if (w.dim(3) != dm.k || w.dim(4) != dm.k) {
    throw ShapeError("conv3d: kernel must be cubic, got " + describe(w));
  }
  if (stride < 1 || padding < 0) {
    throw ShapeError("conv3d: stride must be >= 1 and padding >= 0");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dm.co)) {
    throw ShapeError("conv3d: bias must be [Co]");
  }
  const auto out_extent = [&](int64_t in, const char* axis) {
    if (dm.k > in + 2 * padding) {
      throw ShapeError(std::string("conv3d: kernel ") + std::to_string(dm.k) +
                       " larger than padded input on " + axis + " axis (" +
                       std::to_string(in + 2 * padding) + ")");
    }
    return (in + 2 * padding - dm.k) / stride + 1;
  };
  dm.ho = out_extent(dm.h, "H");
  dm.wo = out_extent(dm.w, "W");
  dm.dow = out_extent(dm.d, "D");
  if (dm.ho < 1 || dm.wo < 1 || dm.dow < 1) {
    throw ShapeError("conv3d: empty output volume");
  }
  return dm;
}

// Forward accumulates into a per-slab f64 scratch regardless of tensor dtype;
// the extra precision keeps f32 volumes within the direct-convolution oracle
// tolerance without changing the deterministic summation order.
template <typename T>
void conv3d_forward_kernel(const ConvDims& dm, const T* x, const T* w,
                           const T* bias, T* y) {
  std::vector<int64_t> hlo, hhi, wlo, whi, dlo, dhi;
  axis_ranges(dm.h, dm.ho, dm.k, dm.s, dm.p, hlo, hhi);
  axis_ranges(dm.w, dm.wo, dm.k, dm.s, dm.p, wlo, whi);
  axis_ranges(dm.d, dm.dow, dm.k, dm.s, dm.p, dlo, dhi);
  const int64_t in_slab = dm.h * dm.w * dm.d;
  const int64_t out_slab = dm.ho * dm.wo * dm.dow;
  parallel_for(dm.n * dm.co, [&](int64_t job_lo, int64_t job_hi) {
    std::vector<double> acc(static_cast<size_t>(out_slab));
    for (int64_t job = job_lo; job < job_hi; ++job) {
      const int64_t n = job / dm.co;
      const int64_t co = job % dm.co;
      std::fill(acc.begin(), acc.end(),
                bias != nullptr ? static_cast<double>(bias[co]) : 0.0);
      for (int64_t ci = 0; ci < dm.ci; ++ci) {
        const T* xc = x + (n * dm.ci + ci) * in_slab;
        const T* wc = w + (co * dm.ci + ci) * dm.k * dm.k * dm.k;
        for (int64_t kh = 0; kh < dm.k; ++kh) {
          for (int64_t kw = 0; kw < dm.k; ++kw) {
            for (int64_t kd = 0; kd < dm.k; ++kd) {
              const double wv = wc[(kh * dm.k + kw) * dm.k + kd];
              for (int64_t oh = hlo[kh]; oh < hhi[kh]; ++oh) {
                const int64_t ih = oh * dm.s + kh - dm.p;
                for (int64_t ow = wlo[kw]; ow < whi[kw]; ++ow) {
                  const int64_t iw = ow * dm.s + kw - dm.p;
                  const T* xrow = xc + (ih * dm.w + iw) * dm.d;
                  double* orow = acc.data() + (oh * dm.wo + ow) * dm.dow;
                  const int64_t doff = kd - dm.p;
                  for (int64_t od = dlo[kd]; od < dhi[kd]; ++od) {
                    orow[od] += wv * static_cast<double>(xrow[od * dm.s + doff]);
                  }
                }
              }
            }
          }
        }
      }
      T* oc = y + job * out_slab;
      for (int64_t i = 0; i < out_slab; ++i) oc[i] = static_cast<T>(acc[i]);
    }
  });
}

template <typename T>
void conv3d_backward_kernel(const ConvDims& dm, const T* x, const T* w,
                            const T* g, T* dx, T* dw, T* db, bool has_bias) {
  std::vector<int64_t> hlo, hhi, wlo, whi, dlo, dhi;
  axis_ranges(dm.h, dm.ho, dm.k, dm.s, dm.p, hlo, hhi);
  axis_ranges(dm.w, dm.wo, dm.k, dm.s, dm.p, wlo, whi);
  axis_ranges(dm.d, dm.dow, dm.k, dm.s, dm.p, dlo, dhi);
  const int64_t in_slab = dm.h * dm.w * dm.d;
  const int64_t out_slab = dm.ho * dm.wo * dm.dow;

  // Weight and bias gradients, parallel over output channels.
  parallel_for(dm.co, [&](int64_t co_lo, int64_t co_hi) {
    for (int64_t co = co_lo; co < co_hi; ++co) {
      if (has_bias) {
        double acc = 0;
        for (int64_t n = 0; n < dm.n; ++n) {
          const T* gc = g + (n * dm.co + co) * out_slab;
          for (int64_t i = 0; i < out_slab; ++i)
            acc += static_cast<double>(gc[i]);
        }
        db[co] = static_cast<T>(acc);
      }
      for (int64_t ci = 0; ci < dm.ci; ++ci) {
        T* wc = dw + (co * dm.ci + ci) * dm.k * dm.k * dm.k;
        for (int64_t kh = 0; kh < dm.k; ++kh) {
          for (int64_t kw = 0; kw < dm.k; ++kw) {
            for (int64_t kd = 0; kd < dm.k; ++kd) {
              double acc = 0;
              const int64_t doff = kd - dm.p;
              for (int64_t n = 0; n < dm.n; ++n) {
                const T* xc = x + (n * dm.ci + ci) * in_slab;
                const T* gc = g + (n * dm.co + co) * out_slab;
                for (int64_t oh = hlo[kh]; oh < hhi[kh]; ++oh) {
                  const int64_t ih = oh * dm.s + kh - dm.p;
                  for (int64_t ow = wlo[kw]; ow < whi[kw]; ++ow) {
                    const int64_t iw = ow * dm.s + kw - dm.p;
                    const T* xrow = xc + (ih * dm.w + iw) * dm.d;
                    const T* grow = gc + (oh * dm.wo + ow) * dm.dow;
                    for (int64_t od = dlo[kd]; od < dhi[kd]; ++od) {
                      acc += static_cast<double>(xrow[od * dm.s + doff]) *
                             static_cast<double>(grow[od]);
                    }
                  }
                }
              }
              wc[(kh * dm.k + kw) * dm.k + kd] = static_cast<T>(acc);
            }
          }
        }
      }
    }
  });

  // Input gradient, parallel over (n, ci) slabs, f64 scratch per slab.
  parallel_for(dm.n * dm.ci, [&](int64_t job_lo, int64_t job_hi) {
    std::vector<double> acc(static_cast<size_t>(in_slab));
    for (int64_t job = job_lo; job < job_hi; ++job) {
      const int64_t n = job / dm.ci;
      const int64_t ci = job % dm.ci;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int64_t co = 0; co < dm.co; ++co) {
        const T* gc = g + (n * dm.co + co) * out_slab;
        const T* wc = w + (co * dm.ci + ci) * dm.k * dm.k * dm.k;
        for (int64_t kh = 0; kh < dm.k; ++kh) {
          for (int64_t kw = 0; kw < dm.k; ++kw) {
            for (int64_t kd = 0; kd < dm.k; ++kd) {
              const double wv = wc[(kh * dm.k + kw) * dm.k + kd];
              const int64_t doff = kd - dm.p;
              for (int64_t oh = hlo[kh]; oh < hhi[kh]; ++oh) {
                const int64_t ih = oh * dm.s + kh - dm.p;
                for (int64_t ow = wlo[kw]; ow < whi[kw]; ++ow) {
                  const int64_t iw = ow * dm.s + kw - dm.p;
                  double* dxrow = acc.data() + (ih * dm.w + iw) * dm.d;
                  const T* grow = gc + (oh * dm.wo + ow) * dm.dow;
                  for (int64_t od = dlo[kd]; od < dhi[kd]; ++od) {
                    dxrow[od * dm.s + doff] +=
                        wv * static_cast<double>(grow[od]);
                  }
                }
              }
            }
          }
        }
      }
      T* dxc = dx + job * in_slab;
      for (int64_t i = 0; i < in_slab; ++i) dxc[i] = static_cast<T>(acc[i]);
    }
  });
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  const ConvDims dm = conv_dims(x, weight, bias, stride, padding);
  Tensor out = Tensor::zeros({dm.n, dm.co, dm.ho, dm.wo, dm.dow}, x.dtype());
  if (x.dtype() == Dtype::f32) {
    conv3d_forward_kernel<float>(
        dm, x.data<float>().data(), weight.data<float>().data(),
        bias.defined() ? bias.data<float>().data() : nullptr,
        out.mut<float>().data());
  } else {
    conv3d_forward_kernel<double>(
        dm, x.data<double>().data(), weight.data<double>().data(),
        bias.defined() ? bias.data<double>().data() : nullptr,
        out.mut<double>().data());
  }
  const Tensor* bias_ptr = bias.defined() ? &bias : nullptr;
  if (Tape* tape = ops::grad_context({&x, &weight, bias_ptr})) {
    Tensor xc = x, wc = weight, bc = bias;
    tape->record(out, "conv3d", {&x, &weight, bias_ptr},
                 [xc, wc, bc, dm](const Tensor& g) {
                   Tensor dx = zeros_like(xc);
                   Tensor dw = zeros_like(wc);
                   Tensor db = bc.defined() ? zeros_like(bc) : Tensor();
                   if (g.dtype() == Dtype::f32) {
                     conv3d_backward_kernel<float>(
                         dm, xc.data<float>().data(), wc.data<float>().data(),
                         g.data<float>().data(), dx.mut<float>().data(),
                         dw.mut<float>().data(),
                         db.defined() ? db.mut<float>().data() : nullptr,
                         db.defined());
                   } else {
                     conv3d_backward_kernel<double>(
                         dm, xc.data<double>().data(),
                         wc.data<double>().data(), g.data<double>().data(),
                         dx.mut<double>().data(), dw.mut<double>().data(),
                         db.defined() ? db.mut<double>().data() : nullptr,
                         db.defined());
                   }
                   return std::vector<Tensor>{std::move(dx), std::move(dw),
                                              std::move(db)};
                 });
  } else {
    out.set_requires_grad(x.requires_grad() || weight.requires_grad() ||
                          (bias.defined() && bias.requires_grad()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace {

struct TapPlan {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 carries (1 - w1)
};

TapPlan plan_axis(int64_t in, int64_t out, Resample mode) {
  TapPlan plan;
  plan.i0.resize(static_cast<size_t>(out));
  plan.i1.resize(static_cast<size_t>(out));
  plan.w1.resize(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    if (mode == Resample::nearest) {
      int64_t si = static_cast<int64_t>((static_cast<double>(o) + 0.5) * ratio);
      if (si > in - 1) si = in - 1;
      plan.i0[static_cast<size_t>(o)] = si;
      plan.i1[static_cast<size_t>(o)] = si;
      plan.w1[static_cast<size_t>(o)] = 0.0;
    } else {
      const double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      int64_t lo = static_cast<int64_t>(std::floor(src));
      double t = src - static_cast<double>(lo);
      if (lo < 0) {
        lo = 0;
        t = 0.0;
      }
      if (lo >= in - 1) {
        lo = in - 1;
        t = 0.0;
      }
      plan.i0[static_cast<size_t>(o)] = lo;
      plan.i1[static_cast<size_t>(o)] = lo + (t > 0.0 ? 1 : 0);
      plan.w1[static_cast<size_t>(o)] = t;
    }
  }
  return plan;
}

// Resamples one spatial axis of [N,C,H,W,D].
Tensor resize_axis(const Tensor& x, int axis, int64_t out_extent,
                   Resample mode) {
  const int64_t in_extent = x.dim(static_cast<size_t>(axis));
  if (in_extent == out_extent) return x;
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = out_extent;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(static_cast<size_t>(i));
  for (size_t i = static_cast<size_t>(axis) + 1; i < x.rank(); ++i)
    inner *= x.dim(i);
  const TapPlan plan = plan_axis(in_extent, out_extent, mode);

  Tensor out = Tensor::zeros(out_shape, x.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = x.data<T>();
    auto dst = out.mut<T>();
    for (int64_t o = 0; o < outer; ++o) {
      const T* s = src.data() + o * in_extent * inner;
      T* d = dst.data() + o * out_extent * inner;
      for (int64_t j = 0; j < out_extent; ++j) {
        const T* r0 = s + plan.i0[static_cast<size_t>(j)] * inner;
        const T* r1 = s + plan.i1[static_cast<size_t>(j)] * inner;
        const double w1 = plan.w1[static_cast<size_t>(j)];
        const double w0 = 1.0 - w1;
        T* dr = d + j * inner;
        for (int64_t i = 0; i < inner; ++i) {
          dr[i] = static_cast<T>(w0 * static_cast<double>(r0[i]) +
                                 w1 * static_cast<double>(r1[i]));
        }
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }

  if (Tape* tape = ops::grad_context({&x})) {
    const Shape in_shape = x.shape();
    const int64_t ou = outer, in = inner, ie = in_extent, oe = out_extent;
    tape->record(out, "resize_axis", {&x},
                 [plan, in_shape, ou, in, ie, oe](const Tensor& g) {
                   Tensor gin = Tensor::zeros(in_shape, g.dtype());
                   auto body2 = [&](auto tag2) {
                     using T2 = typename decltype(tag2)::type;
                     auto gs = g.data<T2>();
                     auto dst = gin.mut<T2>();
                     for (int64_t o = 0; o < ou; ++o) {
                       const T2* gr = gs.data() + o * oe * in;
                       T2* dr = dst.data() + o * ie * in;
                       for (int64_t j = 0; j < oe; ++j) {
                         const double w1 = plan.w1[static_cast<size_t>(j)];
                         const double w0 = 1.0 - w1;
                         T2* d0 = dr + plan.i0[static_cast<size_t>(j)] * in;
                         T2* d1 = dr + plan.i1[static_cast<size_t>(j)] * in;
                         const T2* gg = gr + j * in;
                         for (int64_t i = 0; i < in; ++i) {
                           d0[i] += static_cast<T2>(
                               w0 * static_cast<double>(gg[i]));
                           if (w1 != 0.0) {
                             d1[i] += static_cast<T2>(
                                 w1 * static_cast<double>(gg[i]));
                           }
                         }
                       }
                     }
                   };
                   if (g.dtype() == Dtype::f32) {
                     body2(std::type_identity<float>{});
                   } else {
                     body2(std::type_identity<double>{});
                   }
                   return std::vector<Tensor>{gin};
                 });
  } else {
    out.set_requires_grad(x.requires_grad());
  }
  return out;
}

}  // namespace

Tensor resize3d(const Tensor& x, Resample mode, std::array<int64_t, 3> size) {
  if (x.rank() != 5) {
    throw ShapeError("resize3d: expected [N,C,H,W,D], got " + describe(x));
  }
  for (int64_t e : size) {
    if (e < 1) throw ShapeError("resize3d: target extents must be >= 1");
  }
  Tensor out = resize_axis(x, 2, size[0], mode);
  out = resize_axis(out, 3, size[1], mode);
  out = resize_axis(out, 4, size[2], mode);
  return out;
}

Tensor upsample(const Tensor& x, Resample mode, int factor) {
  if (factor != 2) {
    throw ContractError("upsample: only factor 2 is supported");
  }
  if (x.rank() != 5) {
    throw ShapeError("upsample: expected [N,C,H,W,D], got " + describe(x));
  }
  return resize3d(x, mode, {2 * x.dim(2), 2 * x.dim(3), 2 * x.dim(4)});
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace {

// Shared normalization core over `groups` contiguous slabs of `span`
// elements: instance norm iterates (n,c) slabs over spatial voxels, layer
// norm iterates tokens over the last axis. affine_period selects whether
// gamma/beta are per-slab (1) or per-position (span).
template <typename T>
void norm_forward(const T* x, T* y, T* xhat, T* inv_std, int64_t groups,
                  int64_t span, const T* gamma, const T* beta,
                  int64_t affine_period, double eps) {
  for (int64_t gidx = 0; gidx < groups; ++gidx) {
    const T* xs = x + gidx * span;
    T* ys = y + gidx * span;
    T* hs = xhat + gidx * span;
    double mean = 0;
    for (int64_t i = 0; i < span; ++i) mean += static_cast<double>(xs[i]);
    mean /= static_cast<double>(span);
    double var = 0;
    for (int64_t i = 0; i < span; ++i) {
      const double d = static_cast<double>(xs[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(span);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[gidx] = static_cast<T>(inv);
    if (affine_period == 1) {
      // instance norm: one gamma/beta per slab (indexed by channel)
      for (int64_t i = 0; i < span; ++i) {
        const double h = (static_cast<double>(xs[i]) - mean) * inv;
        hs[i] = static_cast<T>(h);
        ys[i] = static_cast<T>(static_cast<double>(gamma[0]) * h +
                               static_cast<double>(beta[0]));
      }
    } else {
      // layer norm: gamma/beta indexed along the span
      for (int64_t i = 0; i < span; ++i) {
        const double h = (static_cast<double>(xs[i]) - mean) * inv;
        hs[i] = static_cast<T>(h);
        ys[i] = static_cast<T>(static_cast<double>(gamma[i]) * h +
                               static_cast<double>(beta[i]));
      }
    }
  }
}

}  // namespace

Tensor instance_norm3d(const Tensor& x, const Tensor& gamma,
                       const Tensor& beta, double eps,
                       bool allow_single_voxel) {
  if (x.rank() != 5) {
    throw ShapeError("instance_norm3d: expected [N,C,H,W,D], got " +
                     describe(x));
  }
  const int64_t n = x.dim(0), c = x.dim(1);
  const int64_t span = x.dim(2) * x.dim(3) * x.dim(4);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 ||
      beta.dim(0) != c) {
    throw ShapeError("instance_norm3d: gamma/beta must be [C]");
  }
  if (span < 2 && !allow_single_voxel) {
    throw ShapeError(
        "instance_norm3d: spatial size 1 has degenerate variance (pass "
        "allow_single_voxel to normalize such slabs to zero)");
  }
  Tensor out = zeros_like(x);
  Tensor xhat = zeros_like(x);
  Tensor inv_std = Tensor::zeros({n, c}, x.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    const T* gp = gamma.data<T>().data();
    const T* bp = beta.data<T>().data();
    const T* xp = x.data<T>().data();
    T* yp = out.mut<T>().data();
    T* hp = xhat.mut<T>().data();
    T* ip = inv_std.mut<T>().data();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t gidx = i * c + ch;
        norm_forward<T>(xp + gidx * span, yp + gidx * span, hp + gidx * span,
                        ip + gidx, 1, span, gp + ch, bp + ch, 1, eps);
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }

  if (Tape* tape = ops::grad_context({&x, &gamma, &beta})) {
    Tensor gam = gamma;
    const int64_t nn = n, cc = c, sp = span;
    tape->record(
        out, "instance_norm3d", {&x, &gamma, &beta},
        [xhat, inv_std, gam, nn, cc, sp](const Tensor& g) {
          Tensor dx = Tensor::zeros(g.shape(), g.dtype());
          Tensor dgamma = Tensor::zeros({cc}, g.dtype());
          Tensor dbeta = Tensor::zeros({cc}, g.dtype());
          auto body2 = [&](auto tag2) {
            using T2 = typename decltype(tag2)::type;
            auto gs = g.data<T2>();
            auto hs = xhat.data<T2>();
            auto is = inv_std.data<T2>();
            auto gp = gam.data<T2>();
            auto dxs = dx.mut<T2>();
            auto dgs = dgamma.mut<T2>();
            auto dbs = dbeta.mut<T2>();
            for (int64_t i = 0; i < nn; ++i) {
              for (int64_t ch = 0; ch < cc; ++ch) {
                const int64_t base = (i * cc + ch) * sp;
                double sum_g = 0, sum_gh = 0;
                for (int64_t j = 0; j < sp; ++j) {
                  const double gv = gs[base + j];
                  sum_g += gv;
                  sum_gh += gv * static_cast<double>(hs[base + j]);
                }
                dgs[ch] += static_cast<T2>(sum_gh);
                dbs[ch] += static_cast<T2>(sum_g);
                const double gamv = gp[ch];
                const double inv = is[i * cc + ch];
                const double mg = sum_g / static_cast<double>(sp);
                const double mgh = sum_gh / static_cast<double>(sp);
                for (int64_t j = 0; j < sp; ++j) {
                  const double gv = gs[base + j];
                  const double hv = hs[base + j];
                  dxs[base + j] =
                      static_cast<T2>(gamv * inv * (gv - mg - hv * mgh));
                }
              }
            }
          };
          if (g.dtype() == Dtype::f32) {
            body2(std::type_identity<float>{});
          } else {
            body2(std::type_identity<double>{});
          }
          return std::vector<Tensor>{std::move(dx), std::move(dgamma),
                                     std::move(dbeta)};
        });
  } else {
    out.set_requires_grad(x.requires_grad() || gamma.requires_grad() ||
                          beta.requires_grad());
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
  const int64_t d = x.dim(x.rank() - 1);
  if (d < 2) {
    throw ShapeError("layer_norm: last-axis extent must be >= 2");
  }
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 ||
      beta.dim(0) != d) {
    throw ShapeError("layer_norm: gamma/beta must be [d]");
  }
  const int64_t tokens = x.numel() / d;
  Tensor out = zeros_like(x);
  Tensor xhat = zeros_like(x);
  Shape inv_shape = x.shape();
  inv_shape.back() = 1;
  Tensor inv_std = Tensor::zeros(inv_shape, x.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    norm_forward<T>(x.data<T>().data(), out.mut<T>().data(),
                    xhat.mut<T>().data(), inv_std.mut<T>().data(), tokens, d,
                    gamma.data<T>().data(), beta.data<T>().data(), d, eps);
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }

  if (Tape* tape = ops::grad_context({&x, &gamma, &beta})) {
    Tensor gam = gamma;
    const int64_t tk = tokens, dd = d;
    tape->record(
        out, "layer_norm", {&x, &gamma, &beta},
        [xhat, inv_std, gam, tk, dd](const Tensor& g) {
          Tensor dx = Tensor::zeros(g.shape(), g.dtype());
          Tensor dgamma = Tensor::zeros({dd}, g.dtype());
          Tensor dbeta = Tensor::zeros({dd}, g.dtype());
          auto body2 = [&](auto tag2) {
            using T2 = typename decltype(tag2)::type;
            auto gs = g.data<T2>();
            auto hs = xhat.data<T2>();
            auto is = inv_std.data<T2>();
            auto gp = gam.data<T2>();
            auto dxs = dx.mut<T2>();
            auto dgs = dgamma.mut<T2>();
            auto dbs = dbeta.mut<T2>();
            for (int64_t t = 0; t < tk; ++t) {
              const int64_t base = t * dd;
              double sum_gg = 0, sum_ggh = 0;
              for (int64_t j = 0; j < dd; ++j) {
                const double gg =
                    static_cast<double>(gs[base + j]) * static_cast<double>(gp[j]);
                sum_gg += gg;
                sum_ggh += gg * static_cast<double>(hs[base + j]);
                dgs[j] += static_cast<T2>(static_cast<double>(gs[base + j]) *
                                          static_cast<double>(hs[base + j]));
                dbs[j] += gs[base + j];
              }
              const double inv = is[t];
              const double mg = sum_gg / static_cast<double>(dd);
              const double mgh = sum_ggh / static_cast<double>(dd);
              for (int64_t j = 0; j < dd; ++j) {
                const double gg =
                    static_cast<double>(gs[base + j]) * static_cast<double>(gp[j]);
                const double hv = hs[base + j];
                dxs[base + j] = static_cast<T2>(inv * (gg - mg - hv * mgh));
              }
            }
          };
          if (g.dtype() == Dtype::f32) {
            body2(std::type_identity<float>{});
          } else {
            body2(std::type_identity<double>{});
          }
          return std::vector<Tensor>{std::move(dx), std::move(dgamma),
                                     std::move(dbeta)};
        });
  } else {
    out.set_requires_grad(x.requires_grad() || gamma.requires_grad() ||
                          beta.requires_grad());
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear / attention / feed-forward
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) {
    throw ShapeError("linear: weight must be [out,in], got " +
                     describe(weight));
  }
  const int64_t in = weight.dim(1);
  const int64_t out = weight.dim(0);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != in) {
    throw ShapeError("linear: input " + describe(x) + " does not end in " +
                     std::to_string(in));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
    throw ShapeError("linear: bias must be [out]");
  }
  const int64_t rows = x.numel() / in;
  Tensor x2 = ops::reshape(x, {rows, in});
  Tensor wt = ops::permute(weight, {1, 0});
  Tensor y = ops::matmul(x2, wt);
  if (bias.defined()) y = ops::add(y, bias);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(out);
  return ops::reshape(y, out_shape);
}

Tensor multi_head_attention(const Tensor& x, const MhaParams& p, int heads) {
  if (x.rank() != 3) {
    throw ShapeError("multi_head_attention: expected [N,tokens,d], got " +
                     describe(x));
  }
  const int64_t n = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("multi_head_attention: heads (" + std::to_string(heads) +
                      ") must divide embedding width (" + std::to_string(d) +
                      ")");
  }
  const int64_t dk = d / heads;
  const auto split = [&](const Tensor& t) {
    return ops::permute(ops::reshape(t, {n, tokens, heads, dk}),
                        {0, 2, 1, 3});
  };
  Tensor q = split(linear(x, p.wq, p.bq));
  Tensor k = split(linear(x, p.wk, p.bk));
  Tensor v = split(linear(x, p.wv, p.bv));
  Tensor scores = ops::matmul(q, ops::permute(k, {0, 1, 3, 2}));
  scores = ops::scale(scores, 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor attn = ops::softmax(scores, 3);
  // Value-sorted reduction over tokens: exact permutation equivariance.
  Tensor ctx = ops::matmul(attn, v, ops::SumOrder::value_sorted);
  Tensor merged =
      ops::reshape(ops::permute(ctx, {0, 2, 1, 3}), {n, tokens, d});
  return linear(merged, p.wo, p.bo);
}

Tensor feed_forward(const Tensor& x, const FfnParams& p, Activation act,
                    double slope) {
  Tensor h = linear(x, p.w1, p.b1);
  switch (act) {
    case Activation::gelu:
      h = ops::gelu(h);
      break;
    case Activation::relu:
      h = ops::relu(h);
      break;
    case Activation::leaky_relu:
      h = ops::leaky_relu(h, slope);
      break;
  }
  return linear(h, p.w2, p.b2);
}

}  // namespace stv::nn
