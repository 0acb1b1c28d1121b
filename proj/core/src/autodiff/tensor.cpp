#include "schedlab/autodiff/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>

namespace schedlab::ad {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw InvalidArgument("tensor shape " + shape_str(shape) + " does not match " +
                          std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::make_shared<std::vector<T>>(std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = node_->shape;
  if (s.size() <= 1) return 1;
  return s.size() == 2 ? s[0] : size() / s.back();
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
  return (*node_->value)[0];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(size(), T(0));
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::leaf_view() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = true;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return from(node_->shape, *node_->value, requires_grad);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace schedlab::ad
