#include "schedlab/autodiff/tape.hpp"

#include <cmath>
#include <string>

namespace schedlab::ad {

template <typename T>
std::vector<T> Gradients<T>::of(const Tensor<T>& leaf) const {
  return leaf.grad();
}

template <typename T>
bool Tape<T>::tracks(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!enabled_) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void Tape<T>::record(std::string_view op, std::initializer_list<const Tensor<T>*> inputs,
                     const Tensor<T>& output, std::function<void()> backward) {
  if (consumed_) throw StateError("cannot record on a consumed tape");
  Record rec{op, {}, output.node_ptr(), std::move(backward)};
  rec.inputs.reserve(inputs.size());
  for (const auto* t : inputs) rec.inputs.push_back(t->node_ptr());
  produced_.insert(output.node());
  records_.push_back(std::move(rec));
}

template <typename T>
void Tape<T>::record(std::string_view op, const std::vector<Tensor<T>>& inputs,
                     const Tensor<T>& output, std::function<void()> backward) {
  if (consumed_) throw StateError("cannot record on a consumed tape");
  Record rec{op, {}, output.node_ptr(), std::move(backward)};
  rec.inputs.reserve(inputs.size());
  for (const auto& t : inputs) rec.inputs.push_back(t.node_ptr());
  produced_.insert(output.node());
  records_.push_back(std::move(rec));
}

template <typename T>
void Tape<T>::prepare_backward() {
  if (consumed_) throw StateError("backward called twice on the same tape; reset() it first");
  // Leaves receive d(output)/d(leaf), not a running sum across tapes.
  for (auto& rec : records_) {
    for (auto& in : rec.inputs) {
      if (in->requires_grad && !produced_.contains(in.get()) && !in->grad.empty()) {
        std::fill(in->grad.begin(), in->grad.end(), T(0));
      }
    }
    if (!rec.output->grad.empty()) {
      std::fill(rec.output->grad.begin(), rec.output->grad.end(), T(0));
    }
  }
}

template <typename T>
void Tape<T>::run_backward() {
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  consumed_ = true;
  for (const auto& leaf : leaves()) {
    for (T g : leaf.node()->grad) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient reached a leaf");
    }
  }
}

template <typename T>
Gradients<T> Tape<T>::backward(const Tensor<T>& scalar_output) {
  if (!scalar_output.defined() || scalar_output.rank() != 0) {
    throw InvalidArgument("backward requires a rank-0 output");
  }
  if (!produced_.contains(scalar_output.node())) {
    throw InvalidArgument("backward output was not produced by this tape");
  }
  prepare_backward();
  auto* node = scalar_output.node();
  node->ensure_grad();
  node->grad[0] = T(1);
  run_backward();
  return {};
}

template <typename T>
Gradients<T> Tape<T>::backward(std::span<const Seed> seeds) {
  prepare_backward();
  for (const auto& seed : seeds) {
    auto* node = seed.tensor.node();
    if (!produced_.contains(node)) {
      throw InvalidArgument("seeded tensor was not produced by this tape");
    }
    if (seed.grad.size() != node->value->size()) {
      throw InvalidArgument("seed gradient size mismatch");
    }
    node->ensure_grad();
    for (std::size_t i = 0; i < seed.grad.size(); ++i) node->grad[i] += seed.grad[i];
  }
  run_backward();
  return {};
}

template <typename T>
std::vector<Tensor<T>> Tape<T>::leaves() const {
  std::vector<Tensor<T>> out;
  std::unordered_set<const detail::Node<T>*> seen;
  for (const auto& rec : records_) {
    for (const auto& in : rec.inputs) {
      if (in->requires_grad && !produced_.contains(in.get()) && seen.insert(in.get()).second) {
        out.emplace_back(in);
      }
    }
  }
  return out;
}

template <typename T>
void Tape<T>::verify() const {
  std::unordered_set<const detail::Node<T>*> earlier;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    for (const auto& in : records_[i].inputs) {
      if (produced_.contains(in.get()) && !earlier.contains(in.get())) {
        throw StateError("record " + std::to_string(i) + " (" + std::string(records_[i].op) +
                         ") consumes a value produced later");
      }
    }
    earlier.insert(records_[i].output.get());
  }
}

template <typename T>
void Tape<T>::reset() {
  records_.clear();
  produced_.clear();
  consumed_ = false;
}

template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace schedlab::ad
