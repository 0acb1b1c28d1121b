#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "schedlab/util/error.hpp"

namespace schedlab::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  // Value buffers are shared between a parameter and its per-tape leaf views.
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), T(0));
  }
};

}  // namespace detail

/// Dense row-major array with an optional gradient accumulator.
///
/// A Tensor is a cheap handle; copies alias the same storage. Values are
/// immutable through the const interface, and only leaves (parameters) are
/// expected to be mutated in place, by the optimizer, between tapes.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value->size(); }

  // 2-d helpers; a rank-1 tensor counts as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> values() const { return *node_->value; }
  std::span<T> mutable_values() { return *node_->value; }
  const T* data() const { return node_->value->data(); }
  T item() const;
  T at(std::size_t r, std::size_t c) const { return (*node_->value)[r * cols() + c]; }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  /// Gradient accumulator; all zeros when nothing was accumulated.
  std::vector<T> grad() const;
  std::span<T> grad_buffer();
  void zero_grad();

  /// Same values, no gradient tracking.
  Tensor detach() const;
  /// New leaf sharing this tensor's value buffer with a private gradient.
  Tensor leaf_view() const;
  /// Deep copy of the values.
  Tensor clone(bool requires_grad = false) const;

  detail::Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const noexcept { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace schedlab::ad
