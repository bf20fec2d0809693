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

#ifndef STV_TENSOR_HPP_
#define STV_TENSOR_HPP_

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "stv/errors.hpp"
#include "stv/rng.hpp"

namespace stv {

enum class Dtype : uint8_t { f32 = 1, f64 = 2 };

inline const char* dtype_name(Dtype dt) {
  return dt == Dtype::f32 ? "f32" : "f64";
}
inline size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Storage {
  std::variant<std::vector<float>, std::vector<double>> buf;
  // Identity of this value on a differentiation tape. Written only by the
  // tape that owns the current training step.
  uint64_t tape_id = 0;
  int node = -1;
};

}  // namespace detail

/// Dense N-dimensional array, row-major, f32 or f64. Values are immutable
/// once a tensor has entered a computation; copies share the buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dt);
  static Tensor full(Shape shape, double value, Dtype dt);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, Dtype dt);
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng,
                       Dtype dt);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            Dtype dt);
  /// f64 scalar of shape [1].
  static Tensor scalar(double value, Dtype dt = Dtype::f64);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t i) const { return shape_.at(i); }
  int64_t numel() const;
  Dtype dtype() const { return dtype_; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  template <typename T>
  std::span<const T> data() const {
    return std::span<const T>(std::get<std::vector<T>>(st_->buf));
  }

  /// Writable view of the buffer. Only valid while the tensor is being
  /// built, before it is shared or recorded on a tape.
  template <typename T>
  std::span<T> mut() {
    return std::span<T>(std::get<std::vector<T>>(st_->buf));
  }

  /// Element read as double regardless of dtype.
  double value_at(int64_t flat) const;
  /// Scalar read; requires numel() == 1.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  /// Deep copy with its own buffer (drops tape identity).
  Tensor clone() const;
  /// Element-converted copy.
  Tensor astype(Dtype dt) const;

  detail::Storage* storage() const { return st_.get(); }

 private:
  Tensor(Shape shape, Dtype dt, std::shared_ptr<detail::Storage> st)
      : shape_(std::move(shape)), dtype_(dt), st_(std::move(st)) {}

  static Tensor allocate(Shape shape, Dtype dt);

  Shape shape_;
  Dtype dtype_ = Dtype::f32;
  std::shared_ptr<detail::Storage> st_;
  bool requires_grad_ = false;
};

/// Uninitialized-to-zero tensor with the same shape/dtype as `like`.
Tensor zeros_like(const Tensor& like);
Tensor ones_like(const Tensor& like);

/// Compact one-line description ("f32[2,3,4]") for diagnostics.
std::string describe(const Tensor& t);

}  // namespace stv

#endif  // STV_TENSOR_HPP_
