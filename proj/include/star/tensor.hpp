#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "star/common.hpp"

namespace star {

// Dense row-major tensor with an optional gradient buffer, templated on the
// scalar type: float for training, double for finite-difference gradient
// checks. Handles share the underlying node, so ops can capture inputs and
// outputs cheaply in backward closures.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily, always values.size() once touched
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = std::move(shape);
    t.n_->values.assign(shape_numel(t.n_->shape), T(0));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape))
      throw NumericsError("Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<TensorNode<T>>();
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }

  // Extent of dimension i; negative i counts from the end.
  int dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    return n_->shape[static_cast<std::size_t>(i)];
  }

  std::size_t size() const { return n_->values.size(); }

  std::span<T> values() { return {n_->values.data(), n_->values.size()}; }
  std::span<const T> values() const { return {n_->values.data(), n_->values.size()}; }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  // Gradient buffer, zero-initialized on first touch.
  std::span<T> grad() {
    ensure_grad();
    return {n_->grad.data(), n_->grad.size()};
  }
  std::span<const T> grad() const { return {n_->grad.data(), n_->grad.size()}; }
  bool has_grad() const { return n_ && n_->grad.size() == n_->values.size(); }
  void ensure_grad() {
    if (n_->grad.size() != n_->values.size()) n_->grad.assign(n_->values.size(), T(0));
  }
  void zero_grad() {
    if (has_grad()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1) throw NumericsError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
    return n_->values[0];
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Reverse-mode tape. Ops append backward closures in creation order, which
// is a valid topological order, so backward() replays them reversed. Each
// closure reads the output node's grad and accumulates into its parents.
// Ops whose output grad was never allocated received no gradient from the
// root (a recorded value the root does not depend on) and are skipped.
template <typename T>
class Tape {
 public:
  void record(std::shared_ptr<TensorNode<T>> out, std::function<void()> step) {
    steps_.emplace_back(std::move(out), std::move(step));
  }

  void backward(const Tensor<T>& root) {
    if (root.size() != 1) throw NumericsError("Tape::backward: root must be scalar");
    auto node = root.node();
    node->grad.assign(1, T(1));
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it)
      if (!it->first->grad.empty()) it->second();
  }

  std::size_t num_ops() const { return steps_.size(); }
  void clear() { steps_.clear(); }

 private:
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, std::function<void()>>> steps_;
};

namespace detail {
template <typename T>
inline Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace detail

// The active tape, or nullptr when no gradient is being recorded. Ops only
// record (and outputs only require grad) while a tape is active.
template <typename T>
inline Tape<T>* active_tape() {
  return detail::tape_slot<T>();
}

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(detail::tape_slot<T>()) { detail::tape_slot<T>() = &tape; }
  ~TapeScope() { detail::tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Suppresses recording; used for teacher forwards and inference so their
// outputs are structurally gradient-free.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::tape_slot<T>()) { detail::tape_slot<T>() = nullptr; }
  ~NoGradScope() { detail::tape_slot<T>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace star
