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

#include "stv/tensor.hpp"

#include <cmath>
#include <sstream>

namespace stv {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (int64_t e : shape) {
    if (e < 1) {
      throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
    }
  }
}

}  // namespace

Tensor Tensor::allocate(Shape shape, Dtype dt) {
  validate_shape(shape);
  auto st = std::make_shared<detail::Storage>();
  const size_t n = static_cast<size_t>(shape_numel(shape));
  if (dt == Dtype::f32) {
    st->buf = std::vector<float>(n, 0.0f);
  } else {
    st->buf = std::vector<double>(n, 0.0);
  }
  return Tensor(std::move(shape), dt, std::move(st));
}

Tensor Tensor::zeros(Shape shape, Dtype dt) {
  return allocate(std::move(shape), dt);
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t = allocate(std::move(shape), dt);
  if (dt == Dtype::f32) {
    for (auto& v : t.mut<float>()) v = static_cast<float>(value);
  } else {
    for (auto& v : t.mut<double>()) v = value;
  }
  return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dt) {
  Tensor t = allocate(std::move(shape), dt);
  if (dt == Dtype::f32) {
    for (auto& v : t.mut<float>()) v = static_cast<float>(rng.uniform(lo, hi));
  } else {
    for (auto& v : t.mut<double>()) v = rng.uniform(lo, hi);
  }
  return t;
}

Tensor Tensor::normal(Shape shape, double mean, double stddev, Rng& rng,
                      Dtype dt) {
  Tensor t = allocate(std::move(shape), dt);
  if (dt == Dtype::f32) {
    for (auto& v : t.mut<float>())
      v = static_cast<float>(rng.normal(mean, stddev));
  } else {
    for (auto& v : t.mut<double>()) v = rng.normal(mean, stddev);
  }
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values,
                           Dtype dt) {
  Tensor t = allocate(std::move(shape), dt);
  if (t.numel() != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_values: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(t.shape()));
  }
  if (dt == Dtype::f32) {
    auto out = t.mut<float>();
    for (size_t i = 0; i < values.size(); ++i)
      out[i] = static_cast<float>(values[i]);
  } else {
    auto out = t.mut<double>();
    for (size_t i = 0; i < values.size(); ++i) out[i] = values[i];
  }
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) {
  return full(Shape{1}, value, dt);
}

int64_t Tensor::numel() const { return shape_numel(shape_); }

double Tensor::value_at(int64_t flat) const {
  if (dtype_ == Dtype::f32) return data<float>()[static_cast<size_t>(flat)];
  return data<double>()[static_cast<size_t>(flat)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item(): tensor has " + std::to_string(numel()) +
                        " elements, expected 1");
  }
  return value_at(0);
}

bool Tensor::all_finite() const {
  if (!defined()) return true;
  if (dtype_ == Dtype::f32) {
    for (float v : data<float>())
      if (!std::isfinite(v)) return false;
  } else {
    for (double v : data<double>())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  Tensor t = allocate(shape_, dtype_);
  if (dtype_ == Dtype::f32) {
    auto src = data<float>();
    auto dst = t.mut<float>();
    std::copy(src.begin(), src.end(), dst.begin());
  } else {
    auto src = data<double>();
    auto dst = t.mut<double>();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  t.requires_grad_ = requires_grad_;
  return t;
}

Tensor Tensor::astype(Dtype dt) const {
  if (dt == dtype_) return clone();
  Tensor t = allocate(shape_, dt);
  const int64_t n = numel();
  if (dt == Dtype::f32) {
    auto dst = t.mut<float>();
    for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(value_at(i));
  } else {
    auto dst = t.mut<double>();
    for (int64_t i = 0; i < n; ++i) dst[i] = value_at(i);
  }
  return t;
}

Tensor zeros_like(const Tensor& like) {
  return Tensor::zeros(like.shape(), like.dtype());
}

Tensor ones_like(const Tensor& like) {
  return Tensor::full(like.shape(), 1.0, like.dtype());
}

std::string describe(const Tensor& t) {
  if (!t.defined()) return "undefined";
  return std::string(dtype_name(t.dtype())) + shape_str(t.shape());
}

}  // namespace stv
