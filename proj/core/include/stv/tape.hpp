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

#ifndef STV_TAPE_HPP_
#define STV_TAPE_HPP_

#include <functional>
#include <vector>

#include "stv/tensor.hpp"

namespace stv {

/// Reverse-mode differentiation tape. Nodes are appended in execution order,
/// which is a valid topological order; backward() walks them in reverse and
/// sums gradients where values fan out. A tape belongs to one logical thread
/// (activate it with TapeScope) and holds tensors of a single dtype.
class Tape {
 public:
  /// Maps the gradient w.r.t. an op's output to gradients w.r.t. its inputs
  /// (aligned with the recorded input list; undefined entries are skipped).
  using BackwardFn = std::function<std::vector<Tensor>(const Tensor&)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tape activated on this thread, or nullptr.
  static Tape* active();

  /// Records `out = op(inputs...)`; marks `out` as requiring grad and
  /// registers leaf nodes for inputs seen for the first time.
  void record(Tensor& out, const char* op,
              std::initializer_list<const Tensor*> inputs, BackwardFn fn);

  /// Accumulates d(loss)/d(node) for every recorded node reachable from
  /// `loss`, which must be a scalar recorded on this tape.
  void backward(const Tensor& loss);

  /// Gradient of `t` after backward(), or nullptr when `t` is not on this
  /// tape / was not reached.
  const Tensor* grad(const Tensor& t) const;
  /// Like grad(), but unused/unreached tensors yield a zero tensor.
  Tensor grad_or_zero(const Tensor& t) const;

  size_t node_count() const { return nodes_.size(); }

 private:
  friend class TapeScope;

  int ensure_node(const Tensor& t);
  int node_of(const Tensor& t) const;
  void accumulate(int node, const Tensor& g);

  struct Node {
    const char* op;
    std::vector<int> inputs;
    BackwardFn back;
  };

  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  Dtype dtype_ = Dtype::f32;
  bool dtype_fixed_ = false;
};

/// RAII guard that makes a tape the active one for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// RAII guard that suspends recording (forward-only region).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

}  // namespace stv

#endif  // STV_TAPE_HPP_
