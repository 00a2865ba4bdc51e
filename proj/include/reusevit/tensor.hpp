// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors (rank 1 or 2) with tape-based reverse-mode
// differentiation. A Tensor is a cheap handle; copies share storage.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "reusevit/error.hpp"

namespace reusevit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  void accumulate(std::size_t i, T v) {
    if (grad.empty()) grad.assign(data.size(), T{0});
    grad[i] += v;
  }
  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty() || shape.size() > 2)
      throw ShapeError("tensor rank must be 1 or 2, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}));
  }
  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<T> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// Rows of a matrix; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? node_->shape[1] : node_->shape[0]; }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access. Only parameters and freshly built tensors should
  /// be mutated; anything already recorded on a tape must stay untouched.
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; all zeros when nothing has accumulated yet.
  std::vector<T> grad() const {
    return node_->grad.empty() ? std::vector<T>(numel(), T{0}) : node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor reshape(Shape s) const {
    if (shape_numel(s) != numel()) throw ShapeError("reshape " + shape_str(shape()) + " -> " + shape_str(s));
    return Tensor(std::move(s), node_->data, false);
  }
  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()), requires_grad());
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations. `backward` replays the
/// recorded adjoint closures in reverse recording order, each exactly once,
/// then clears the record.
template <class T>
class Tape {
 public:
  void record(std::function<void()> adjoint) { ops_.push_back(std::move(adjoint)); }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward(): loss is not connected to any parameter");
    loss.node()->accumulate(0, T{1});
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target on this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (e.g. for evaluation passes inside a training loop).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace reusevit
