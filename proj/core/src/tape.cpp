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

#include "stv/tape.hpp"

#include <atomic>

namespace stv {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::atomic<uint64_t> g_tape_counter{1};

template <typename T>
void add_into(std::span<T> acc, std::span<const T> g) {
  for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

}  // namespace

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

int Tape::node_of(const Tensor& t) const {
  const detail::Storage* st = t.storage();
  if (st != nullptr && st->tape_id == id_) return st->node;
  return -1;
}

int Tape::ensure_node(const Tensor& t) {
  int node = node_of(t);
  if (node >= 0) return node;
  if (!dtype_fixed_) {
    dtype_ = t.dtype();
    dtype_fixed_ = true;
  } else if (t.dtype() != dtype_) {
    throw ContractError(std::string("tape holds ") + dtype_name(dtype_) +
                        " values, got " + dtype_name(t.dtype()));
  }
  nodes_.push_back(Node{"leaf", {}, nullptr});
  node = static_cast<int>(nodes_.size()) - 1;
  t.storage()->tape_id = id_;
  t.storage()->node = node;
  return node;
}

void Tape::record(Tensor& out, const char* op,
                  std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  if (!dtype_fixed_) {
    dtype_ = out.dtype();
    dtype_fixed_ = true;
  } else if (out.dtype() != dtype_) {
    throw ContractError(std::string("tape holds ") + dtype_name(dtype_) +
                        " values, got " + dtype_name(out.dtype()));
  }
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    ids.push_back(in != nullptr && in->requires_grad() ? ensure_node(*in) : -1);
  }
  nodes_.push_back(Node{op, std::move(ids), std::move(fn)});
  out.set_requires_grad(true);
  out.storage()->tape_id = id_;
  out.storage()->node = static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const Tensor& g) {
  Tensor& slot = grads_[static_cast<size_t>(node)];
  if (!slot.defined()) {
    slot = g.clone();
    return;
  }
  if (g.dtype() == Dtype::f32) {
    add_into(slot.mut<float>(), g.data<float>());
  } else {
    add_into(slot.mut<double>(), g.data<double>());
  }
}

void Tape::backward(const Tensor& loss) {
  const int root = node_of(loss);
  if (root < 0) {
    throw ContractError("backward: loss was not recorded on this tape");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<size_t>(root)] = ones_like(loss);

  NoGradScope no_grad;  // backward math must not extend the tape
  for (int i = root; i >= 0; --i) {
    const Node& node = nodes_[static_cast<size_t>(i)];
    const Tensor& g = grads_[static_cast<size_t>(i)];
    if (!g.defined() || !node.back) continue;
    std::vector<Tensor> gins = node.back(g);
    for (size_t j = 0; j < node.inputs.size(); ++j) {
      const int target = node.inputs[j];
      if (target >= 0 && j < gins.size() && gins[j].defined()) {
        accumulate(target, gins[j]);
      }
    }
  }
}

const Tensor* Tape::grad(const Tensor& t) const {
  const int node = node_of(t);
  if (node < 0 || static_cast<size_t>(node) >= grads_.size()) return nullptr;
  const Tensor& g = grads_[static_cast<size_t>(node)];
  return g.defined() ? &g : nullptr;
}

Tensor Tape::grad_or_zero(const Tensor& t) const {
  const Tensor* g = grad(t);
  return g != nullptr ? *g : Tensor::zeros(t.shape(), t.dtype());
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = prev_; }

}  // namespace stv
