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

#include "stv/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "stv/parallel.hpp"

namespace stv::ops {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

template <typename T, typename F>
void map1(const Tensor& x, Tensor& y, F f) {
  auto in = x.data<T>();
  auto out = y.mut<T>();
  for (size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<T>(f(static_cast<double>(in[i])));
  }
}

// gin[i] = g[i] * df(x[i], y[i])
template <typename T, typename F>
void backprop1(const Tensor& g, const Tensor& x, const Tensor& y, Tensor& gin,
               F df) {
  auto gs = g.data<T>();
  auto xs = x.data<T>();
  auto ys = y.data<T>();
  auto out = gin.mut<T>();
  for (size_t i = 0; i < gs.size(); ++i) {
    out[i] = static_cast<T>(
        static_cast<double>(gs[i]) *
        df(static_cast<double>(xs[i]), static_cast<double>(ys[i])));
  }
}

template <typename FwdF, typename DfF>
Tensor unary_op(const Tensor& x, const char* name, FwdF f, DfF df) {
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  if (x.dtype() == Dtype::f32) {
    map1<float>(x, y, f);
  } else {
    map1<double>(x, y, f);
  }
  if (Tape* tape = grad_context({&x})) {
    tape->record(y, name, {&x}, [x, y, df](const Tensor& g) {
      Tensor gin = zeros_like(x);
      if (g.dtype() == Dtype::f32) {
        backprop1<float>(g, x, y, gin, df);
      } else {
        backprop1<double>(g, x, y, gin, df);
      }
      return std::vector<Tensor>{gin};
    });
  } else {
    y.set_requires_grad(x.requires_grad());
  }
  return y;
}

struct BinaryPlan {
  Shape out_shape;
  int64_t d0 = 1, d1 = 1, inner = 1;
  int64_t a_s0 = 0, a_s1 = 0, b_s0 = 0, b_s1 = 0;
};

Shape align_shape(const Shape& s, size_t rank) {
  Shape padded(rank, 1);
  std::copy(s.begin(), s.end(), padded.begin() + (rank - s.size()));
  return padded;
}

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, const char* name) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(name) + ": dtype mismatch (" +
                        describe(a) + " vs " + describe(b) + ")");
  }
  const size_t rank = std::max(a.rank(), b.rank());
  const Shape sa = align_shape(a.shape(), rank);
  const Shape sb = align_shape(b.shape(), rank);
  BinaryPlan plan;
  plan.out_shape.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (sa[i] == sb[i]) {
      plan.out_shape[i] = sa[i];
    } else if (i < 2 && std::min(sa[i], sb[i]) == 1) {
      plan.out_shape[i] = std::max(sa[i], sb[i]);
    } else {
      throw ShapeError(std::string(name) + ": incompatible shapes " +
                       shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " (broadcast is limited to leading batch/channel dims)");
    }
  }
  plan.d0 = rank > 0 ? plan.out_shape[0] : 1;
  plan.d1 = rank > 1 ? plan.out_shape[1] : 1;
  for (size_t i = 2; i < rank; ++i) plan.inner *= plan.out_shape[i];
  const int64_t a1 = rank > 1 ? sa[1] : 1;
  const int64_t b1 = rank > 1 ? sb[1] : 1;
  plan.a_s1 = a1 == 1 ? 0 : plan.inner;
  plan.b_s1 = b1 == 1 ? 0 : plan.inner;
  plan.a_s0 = (rank > 0 && sa[0] == 1) ? 0 : a1 * plan.inner;
  plan.b_s0 = (rank > 0 && sb[0] == 1) ? 0 : b1 * plan.inner;
  return plan;
}

template <typename T, typename F>
void map2(const Tensor& a, const Tensor& b, Tensor& out, const BinaryPlan& p,
          F f) {
  auto pa = a.data<T>();
  auto pb = b.data<T>();
  auto po = out.mut<T>();
  int64_t o = 0;
  for (int64_t i0 = 0; i0 < p.d0; ++i0) {
    for (int64_t i1 = 0; i1 < p.d1; ++i1) {
      const T* ra = pa.data() + i0 * p.a_s0 + i1 * p.a_s1;
      const T* rb = pb.data() + i0 * p.b_s0 + i1 * p.b_s1;
      for (int64_t i = 0; i < p.inner; ++i, ++o) {
        po[o] = static_cast<T>(
            f(static_cast<double>(ra[i]), static_cast<double>(rb[i])));
      }
    }
  }
}

template <typename FwdF>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* name,
                      FwdF f) {
  BinaryPlan plan = plan_binary(a, b, name);
  Tensor out = Tensor::zeros(plan.out_shape, a.dtype());
  if (a.dtype() == Dtype::f32) {
    map2<float>(a, b, out, plan, f);
  } else {
    map2<double>(a, b, out, plan, f);
  }
  return out;
}

}  // namespace

Tape* grad_context(std::initializer_list<const Tensor*> ins) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : ins) {
    if (t != nullptr && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target_shape) {
  if (g.shape() == target_shape) return g;
  const size_t rank = g.rank();
  const Shape aligned = align_shape(target_shape, rank);
  for (size_t i = 0; i < rank; ++i) {
    if (aligned[i] != 1 && aligned[i] != g.shape()[i]) {
      throw ShapeError("reduce_to_shape: " + shape_str(g.shape()) + " -> " +
                       shape_str(target_shape));
    }
  }
  Tensor out = Tensor::zeros(target_shape, g.dtype());
  const auto gst = strides_of(g.shape());
  const auto ast = strides_of(aligned);
  std::vector<int64_t> tst(rank, 0);
  for (size_t i = 0; i < rank; ++i) tst[i] = aligned[i] == 1 ? 0 : ast[i];
  const int64_t n = g.numel();
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = g.data<T>();
    auto dst = out.mut<T>();
    for (int64_t flat = 0; flat < n; ++flat) {
      int64_t rem = flat, tflat = 0;
      for (size_t i = 0; i < rank; ++i) {
        const int64_t idx = rem / gst[i];
        rem -= idx * gst[i];
        tflat += idx * tst[i];
      }
      dst[tflat] += src[flat];
    }
  };
  if (g.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out =
      binary_forward(a, b, "add", [](double x, double y) { return x + y; });
  if (Tape* tape = grad_context({&a, &b})) {
    Shape as = a.shape(), bs = b.shape();
    tape->record(out, "add", {&a, &b}, [as, bs](const Tensor& g) {
      return std::vector<Tensor>{reduce_to_shape(g, as),
                                 reduce_to_shape(g, bs)};
    });
  } else {
    out.set_requires_grad(a.requires_grad() || b.requires_grad());
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out =
      binary_forward(a, b, "sub", [](double x, double y) { return x - y; });
  if (Tape* tape = grad_context({&a, &b})) {
    Shape as = a.shape(), bs = b.shape();
    tape->record(out, "sub", {&a, &b}, [as, bs](const Tensor& g) {
      return std::vector<Tensor>{reduce_to_shape(g, as),
                                 reduce_to_shape(neg(g), bs)};
    });
  } else {
    out.set_requires_grad(a.requires_grad() || b.requires_grad());
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out =
      binary_forward(a, b, "mul", [](double x, double y) { return x * y; });
  if (Tape* tape = grad_context({&a, &b})) {
    tape->record(out, "mul", {&a, &b}, [a, b](const Tensor& g) {
      return std::vector<Tensor>{reduce_to_shape(mul(g, b), a.shape()),
                                 reduce_to_shape(mul(g, a), b.shape())};
    });
  } else {
    out.set_requires_grad(a.requires_grad() || b.requires_grad());
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  const int64_t nb = b.numel();
  for (int64_t i = 0; i < nb; ++i) {
    if (b.value_at(i) == 0.0) {
      throw DomainError("div: zero denominator at flat index " +
                        std::to_string(i));
    }
  }
  Tensor out =
      binary_forward(a, b, "div", [](double x, double y) { return x / y; });
  if (Tape* tape = grad_context({&a, &b})) {
    tape->record(out, "div", {&a, &b}, [a, b, out](const Tensor& g) {
      Tensor ga = reduce_to_shape(div(g, b), a.shape());
      Tensor gb = reduce_to_shape(neg(div(mul(g, out), b)), b.shape());
      return std::vector<Tensor>{std::move(ga), std::move(gb)};
    });
  } else {
    out.set_requires_grad(a.requires_grad() || b.requires_grad());
  }
  return out;
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (!(x.value_at(i) > 0.0)) {
      throw DomainError("log: non-positive value " +
                        std::to_string(x.value_at(i)) + " at flat index " +
                        std::to_string(i));
    }
  }
  return unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary_op(
      x, "leaky_relu", [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, "neg", [](double v) { return -v; },
      [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, "scale", [c](double v) { return c * v; },
      [c](double, double) { return c; });
}

Tensor shift(const Tensor& x, double c) {
  return unary_op(
      x, "shift", [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary_op(
      x, "clamp",
      [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

namespace {

struct MatmulPlan {
  Shape out_shape;
  Shape batch_shape;
  int64_t batches = 1, m = 0, k = 0, n = 0;
  std::vector<int64_t> a_boff, b_boff;  // flat operand offset per batch
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw ContractError("matmul: dtype mismatch");
  }
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     describe(a) + " and " + describe(b));
  }
  MatmulPlan plan;
  plan.m = a.shape()[a.rank() - 2];
  plan.k = a.shape()[a.rank() - 1];
  plan.n = b.shape()[b.rank() - 1];
  if (b.shape()[b.rank() - 2] != plan.k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  const size_t brank = std::max(a.rank(), b.rank()) - 2;
  Shape ab(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  ab = align_shape(ab, brank);
  bb = align_shape(bb, brank);
  plan.batch_shape.resize(brank);
  for (size_t i = 0; i < brank; ++i) {
    if (ab[i] == bb[i]) {
      plan.batch_shape[i] = ab[i];
    } else if (std::min(ab[i], bb[i]) == 1) {
      plan.batch_shape[i] = std::max(ab[i], bb[i]);
    } else {
      throw ShapeError("matmul: batch dims incompatible, " +
                       shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
  }
  plan.batches = shape_numel(plan.batch_shape);
  plan.out_shape = plan.batch_shape;
  plan.out_shape.push_back(plan.m);
  plan.out_shape.push_back(plan.n);

  const auto ost = strides_of(plan.batch_shape);
  std::vector<int64_t> ast(brank, 0), bst(brank, 0);
  int64_t acc = plan.m * plan.k;
  for (size_t i = brank; i-- > 0;) {
    ast[i] = ab[i] == 1 ? 0 : acc;
    acc *= ab[i];
  }
  acc = plan.k * plan.n;
  for (size_t i = brank; i-- > 0;) {
    bst[i] = bb[i] == 1 ? 0 : acc;
    acc *= bb[i];
  }
  plan.a_boff.resize(static_cast<size_t>(plan.batches));
  plan.b_boff.resize(static_cast<size_t>(plan.batches));
  for (int64_t bi = 0; bi < plan.batches; ++bi) {
    int64_t rem = bi, aoff = 0, boff = 0;
    for (size_t i = 0; i < brank; ++i) {
      const int64_t idx = rem / ost[i];
      rem -= idx * ost[i];
      aoff += idx * ast[i];
      boff += idx * bst[i];
    }
    plan.a_boff[static_cast<size_t>(bi)] = aoff;
    plan.b_boff[static_cast<size_t>(bi)] = boff;
  }
  return plan;
}

template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, int64_t m, int64_t k,
                   int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_kernel_sorted(const T* a, const T* b, T* c, int64_t m, int64_t k,
                          int64_t n, std::vector<T>& scratch) {
  scratch.resize(static_cast<size_t>(k));
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      for (int64_t p = 0; p < k; ++p) {
        scratch[static_cast<size_t>(p)] = a[i * k + p] * b[p * n + j];
      }
      std::sort(scratch.begin(), scratch.end());
      T acc = 0;
      for (T v : scratch) acc += v;
      c[i * n + j] = acc;
    }
  }
}

Tensor matmul_raw(const Tensor& a, const Tensor& b, SumOrder order) {
  MatmulPlan plan = plan_matmul(a, b);
  Tensor out = Tensor::zeros(plan.out_shape, a.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* pc = out.mut<T>().data();
    const int64_t osz = plan.m * plan.n;
    if (order == SumOrder::sequential) {
      parallel_for(plan.batches, [&](int64_t lo, int64_t hi) {
        for (int64_t bi = lo; bi < hi; ++bi) {
          matmul_kernel(pa + plan.a_boff[static_cast<size_t>(bi)],
                        pb + plan.b_boff[static_cast<size_t>(bi)],
                        pc + bi * osz, plan.m, plan.k, plan.n);
        }
      });
    } else {
      parallel_for(plan.batches, [&](int64_t lo, int64_t hi) {
        std::vector<T> scratch;
        for (int64_t bi = lo; bi < hi; ++bi) {
          matmul_kernel_sorted(pa + plan.a_boff[static_cast<size_t>(bi)],
                               pb + plan.b_boff[static_cast<size_t>(bi)],
                               pc + bi * osz, plan.m, plan.k, plan.n, scratch);
        }
      });
    }
  };
  if (a.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }
  return out;
}

std::vector<int> transpose_perm(size_t rank) {
  std::vector<int> perm(rank);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[rank - 2], perm[rank - 1]);
  return perm;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, SumOrder order) {
  Tensor out = matmul_raw(a, b, order);
  if (Tape* tape = grad_context({&a, &b})) {
    tape->record(out, "matmul", {&a, &b}, [a, b](const Tensor& g) {
      Tensor bt = permute(b, transpose_perm(b.rank()));
      Tensor at = permute(a, transpose_perm(a.rank()));
      Tensor ga =
          reduce_to_shape(matmul_raw(g, bt, SumOrder::sequential), a.shape());
      Tensor gb =
          reduce_to_shape(matmul_raw(at, g, SumOrder::sequential), b.shape());
      return std::vector<Tensor>{std::move(ga), std::move(gb)};
    });
  } else {
    out.set_requires_grad(a.requires_grad() || b.requires_grad());
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
      infer = static_cast<int>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0) {
      throw ShapeError("reshape: cannot infer extent for " +
                       shape_str(x.shape()) + " -> " + shape_str(new_shape));
    }
    new_shape[static_cast<size_t>(infer)] = x.numel() / known;
    known *= new_shape[static_cast<size_t>(infer)];
  }
  if (known != x.numel()) {
    throw ShapeError("reshape: element count mismatch, " +
                     shape_str(x.shape()) + " -> " + shape_str(new_shape));
  }
  Tensor out = Tensor::zeros(new_shape, x.dtype());
  if (x.dtype() == Dtype::f32) {
    auto src = x.data<float>();
    std::copy(src.begin(), src.end(), out.mut<float>().begin());
  } else {
    auto src = x.data<double>();
    std::copy(src.begin(), src.end(), out.mut<double>().begin());
  }
  if (Tape* tape = grad_context({&x})) {
    Shape orig = x.shape();
    tape->record(out, "reshape", {&x}, [orig](const Tensor& g) {
      return std::vector<Tensor>{reshape(g, orig)};
    });
  } else {
    out.set_requires_grad(x.requires_grad());
  }
  return out;
}

Tensor permute(const Tensor& x, std::vector<int> perm) {
  const size_t rank = x.rank();
  if (perm.size() != rank) {
    throw ShapeError("permute: perm size " + std::to_string(perm.size()) +
                     " for rank " + std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int p = perm[i];
    if (p < 0 || static_cast<size_t>(p) >= rank ||
        seen[static_cast<size_t>(p)]) {
      throw ShapeError("permute: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
    out_shape[i] = x.shape()[static_cast<size_t>(p)];
  }
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  const auto xst = strides_of(x.shape());
  const auto ost = strides_of(out_shape);
  const int64_t n = x.numel();
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = x.data<T>();
    auto dst = out.mut<T>();
    for (int64_t flat = 0; flat < n; ++flat) {
      int64_t rem = flat, soff = 0;
      for (size_t i = 0; i < rank; ++i) {
        const int64_t idx = rem / ost[i];
        rem -= idx * ost[i];
        soff += idx * xst[static_cast<size_t>(perm[i])];
      }
      dst[flat] = src[soff];
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }
  if (Tape* tape = grad_context({&x})) {
    std::vector<int> inv(rank);
    for (size_t i = 0; i < rank; ++i)
      inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    tape->record(out, "permute", {&x}, [inv](const Tensor& g) {
      return std::vector<Tensor>{permute(g, inv)};
    });
  } else {
    out.set_requires_grad(x.requires_grad());
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (parts.size() == 1) return parts[0];
  if (parts.size() > 2) {
    // Chain pairwise so each tape node has two inputs.
    Tensor acc = parts[0];
    for (size_t p = 1; p < parts.size(); ++p) {
      std::array<Tensor, 2> pair{acc, parts[p]};
      acc = concat(std::span<const Tensor>(pair.data(), 2), axis);
    }
    return acc;
  }
  const Tensor& a = parts[0];
  const Tensor& b = parts[1];
  const size_t rank = a.rank();
  if (axis < 0) axis += static_cast<int>(rank);
  if (axis < 0 || static_cast<size_t>(axis) >= rank)
    throw ShapeError("concat: invalid axis");
  if (b.rank() != rank || b.dtype() != a.dtype())
    throw ShapeError("concat: rank/dtype mismatch");
  for (size_t i = 0; i < rank; ++i) {
    if (i == static_cast<size_t>(axis)) continue;
    if (a.shape()[i] != b.shape()[i]) {
      throw ShapeError("concat: extent mismatch off-axis, " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const int64_t ea = a.shape()[static_cast<size_t>(axis)];
  const int64_t eb = b.shape()[static_cast<size_t>(axis)];
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = ea + eb;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= out_shape[i];
  for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i)
    inner *= out_shape[i];
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto sa = a.data<T>();
    auto sb = b.data<T>();
    auto dst = out.mut<T>();
    for (int64_t o = 0; o < outer; ++o) {
      T* d = dst.data() + o * (ea + eb) * inner;
      std::copy_n(sa.data() + o * ea * inner, ea * inner, d);
      std::copy_n(sb.data() + o * eb * inner, eb * inner, d + ea * inner);
    }
  };
  if (a.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }
  if (Tape* tape = grad_context({&a, &b})) {
    const int ax = axis;
    tape->record(out, "concat", {&a, &b}, [ax, ea, eb](const Tensor& g) {
      return std::vector<Tensor>{slice(g, ax, 0, ea), slice(g, ax, ea, eb)};
    });
  } else {
    out.set_requires_grad(a.requires_grad() || b.requires_grad());
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  const size_t rank = x.rank();
  if (axis < 0) axis += static_cast<int>(rank);
  if (axis < 0 || static_cast<size_t>(axis) >= rank)
    throw ShapeError("slice: invalid axis");
  const int64_t ext = x.shape()[static_cast<size_t>(axis)];
  if (start < 0 || len < 1 || start + len > ext) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of extent " +
                     std::to_string(ext));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= x.shape()[i];
  for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i)
    inner *= x.shape()[i];
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = x.data<T>();
    auto dst = out.mut<T>();
    for (int64_t o = 0; o < outer; ++o) {
      const T* s = src.data() + (o * ext + start) * inner;
      std::copy_n(s, len * inner, dst.data() + o * len * inner);
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }
  if (Tape* tape = grad_context({&x})) {
    const int ax = axis;
    const int64_t after = ext - start - len;
    const size_t r = rank;
    tape->record(out, "slice", {&x}, [ax, start, after, r](const Tensor& g) {
      std::vector<std::pair<int64_t, int64_t>> pads(r, {0, 0});
      pads[static_cast<size_t>(ax)] = {start, after};
      return std::vector<Tensor>{pad(g, pads)};
    });
  } else {
    out.set_requires_grad(x.requires_grad());
  }
  return out;
}

Tensor pad(const Tensor& x, std::vector<std::pair<int64_t, int64_t>> pads) {
  const size_t rank = x.rank();
  if (pads.size() != rank) throw ShapeError("pad: one (before,after) per axis");
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (pads[i].first < 0 || pads[i].second < 0)
      throw ShapeError("pad: negative padding");
    out_shape[i] = x.shape()[i] + pads[i].first + pads[i].second;
  }
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  const auto xst = strides_of(x.shape());
  const auto ost = strides_of(out_shape);
  const int64_t n = x.numel();
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = x.data<T>();
    auto dst = out.mut<T>();
    for (int64_t flat = 0; flat < n; ++flat) {
      int64_t rem = flat, ooff = 0;
      for (size_t i = 0; i < rank; ++i) {
        const int64_t idx = rem / xst[i];
        rem -= idx * xst[i];
        ooff += (idx + pads[i].first) * ost[i];
      }
      dst[ooff] = src[flat];
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }
  if (Tape* tape = grad_context({&x})) {
    Shape orig = x.shape();
    tape->record(out, "pad", {&x}, [pads, orig](const Tensor& g) {
      Tensor gin = g;
      for (size_t i = 0; i < orig.size(); ++i) {
        if (pads[i].first != 0 || pads[i].second != 0) {
          gin = slice(gin, static_cast<int>(i), pads[i].first, orig[i]);
        }
      }
      return std::vector<Tensor>{gin};
    });
  } else {
    out.set_requires_grad(x.requires_grad());
  }
  return out;
}

namespace {

std::vector<int> normalize_axes(std::vector<int> axes, size_t rank,
                                const char* name) {
  for (int& a : axes) {
    if (a < 0) a += static_cast<int>(rank);
    if (a < 0 || static_cast<size_t>(a) >= rank)
      throw ShapeError(std::string(name) + ": invalid axis");
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  if (axes.empty())
    throw ShapeError(std::string(name) + ": no axes to reduce");
  return axes;
}

Tensor reduce_impl(const Tensor& x, const std::vector<int>& axes,
                   bool keepdims, bool mean, const char* name) {
  const size_t rank = x.rank();
  std::vector<bool> is_reduced(rank, false);
  int64_t count = 1;
  for (int a : axes) {
    is_reduced[static_cast<size_t>(a)] = true;
    count *= x.shape()[static_cast<size_t>(a)];
  }
  Shape kept = x.shape();
  for (int a : axes) kept[static_cast<size_t>(a)] = 1;
  Shape out_shape;
  for (size_t i = 0; i < rank; ++i) {
    if (is_reduced[i]) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.shape()[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  Tensor out = Tensor::zeros(out_shape, x.dtype());
  const auto xst = strides_of(x.shape());
  const auto kst = strides_of(kept);
  std::vector<int64_t> ost(rank, 0);
  for (size_t i = 0; i < rank; ++i) ost[i] = is_reduced[i] ? 0 : kst[i];
  const int64_t n = x.numel();
  const double inv = 1.0 / static_cast<double>(count);
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = x.data<T>();
    auto dst = out.mut<T>();
    for (int64_t flat = 0; flat < n; ++flat) {
      int64_t rem = flat, ooff = 0;
      for (size_t i = 0; i < rank; ++i) {
        const int64_t idx = rem / xst[i];
        rem -= idx * xst[i];
        ooff += idx * ost[i];
      }
      dst[ooff] += src[flat];
    }
    if (mean) {
      for (auto& v : dst) v = static_cast<T>(static_cast<double>(v) * inv);
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }

  if (Tape* tape = grad_context({&x})) {
    const Shape in_shape = x.shape();
    const Shape kept_shape = kept;
    const double back_scale = mean ? inv : 1.0;
    tape->record(
        out, name, {&x}, [in_shape, kept_shape, back_scale](const Tensor& g) {
          Tensor gk = reshape(g, kept_shape);
          Tensor gin = Tensor::zeros(in_shape, g.dtype());
          const auto ist = strides_of(in_shape);
          const auto kst2 = strides_of(kept_shape);
          const size_t r = in_shape.size();
          const int64_t total = shape_numel(in_shape);
          auto body2 = [&](auto tag2) {
            using T2 = typename decltype(tag2)::type;
            auto src2 = gk.data<T2>();
            auto dst2 = gin.mut<T2>();
            for (int64_t flat = 0; flat < total; ++flat) {
              int64_t rem = flat, koff = 0;
              for (size_t i = 0; i < r; ++i) {
                const int64_t idx = rem / ist[i];
                rem -= idx * ist[i];
                if (kept_shape[i] != 1) koff += idx * kst2[i];
              }
              dst2[flat] = static_cast<T2>(static_cast<double>(src2[koff]) *
                                           back_scale);
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

Tensor reduce_sum(const Tensor& x, std::vector<int> axes, bool keepdims) {
  axes = normalize_axes(std::move(axes), x.rank(), "reduce_sum");
  return reduce_impl(x, axes, keepdims, false, "reduce_sum");
}

Tensor reduce_mean(const Tensor& x, std::vector<int> axes, bool keepdims) {
  axes = normalize_axes(std::move(axes), x.rank(), "reduce_mean");
  return reduce_impl(x, axes, keepdims, true, "reduce_mean");
}

Tensor softmax(const Tensor& x, int axis) {
  const size_t rank = x.rank();
  if (axis < 0) axis += static_cast<int>(rank);
  if (axis < 0 || static_cast<size_t>(axis) >= rank)
    throw ShapeError("softmax: invalid axis");
  const int64_t n_axis = x.shape()[static_cast<size_t>(axis)];
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= x.shape()[i];
  for (size_t i = static_cast<size_t>(axis) + 1; i < rank; ++i)
    inner *= x.shape()[i];

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto body = [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto src = x.data<T>();
    auto dst = out.mut<T>();
    std::vector<T> terms(static_cast<size_t>(n_axis));
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * n_axis * inner + i;
        T mx = src[base];
        for (int64_t j = 1; j < n_axis; ++j) {
          const T v = src[base + j * inner];
          if (v > mx) mx = v;
        }
        for (int64_t j = 0; j < n_axis; ++j) {
          terms[static_cast<size_t>(j)] =
              static_cast<T>(std::exp(static_cast<double>(src[base + j * inner]) -
                                      static_cast<double>(mx)));
          dst[base + j * inner] = terms[static_cast<size_t>(j)];
        }
        // Value-sorted accumulation keeps the result invariant under
        // permutations of the reduced axis.
        std::sort(terms.begin(), terms.end());
        T denom = 0;
        for (T v : terms) denom += v;
        for (int64_t j = 0; j < n_axis; ++j) dst[base + j * inner] /= denom;
      }
    }
  };
  if (x.dtype() == Dtype::f32) {
    body(std::type_identity<float>{});
  } else {
    body(std::type_identity<double>{});
  }

  if (Tape* tape = grad_context({&x})) {
    const int64_t na = n_axis, ou = outer, in = inner;
    tape->record(out, "softmax", {&x}, [out, na, ou, in](const Tensor& g) {
      Tensor gin = zeros_like(g);
      auto body2 = [&](auto tag2) {
        using T2 = typename decltype(tag2)::type;
        auto ys = out.data<T2>();
        auto gs = g.data<T2>();
        auto dst = gin.mut<T2>();
        for (int64_t o = 0; o < ou; ++o) {
          for (int64_t i = 0; i < in; ++i) {
            const int64_t base = o * na * in + i;
            double dot = 0;
            for (int64_t j = 0; j < na; ++j) {
              dot += static_cast<double>(gs[base + j * in]) *
                     static_cast<double>(ys[base + j * in]);
            }
            for (int64_t j = 0; j < na; ++j) {
              dst[base + j * in] =
                  static_cast<T2>(static_cast<double>(ys[base + j * in]) *
                                  (static_cast<double>(gs[base + j * in]) - dot));
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

}  // namespace stv::ops
