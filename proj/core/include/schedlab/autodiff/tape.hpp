#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "schedlab/autodiff/tensor.hpp"

namespace schedlab::ad {

/// Gradient lookup over the leaves of a tape after backward().
template <typename T>
class Gradients {
 public:
  /// d(output)/d(leaf); zeros for a leaf that did not take part.
  std::vector<T> of(const Tensor<T>& leaf) const;
};

/// Define-by-run record of differentiable operations.
///
/// Records are appended in execution order, so every input of record i is
/// either a leaf or the output of a record j < i. A tape supports exactly one
/// backward pass; call reset() to reuse it.
template <typename T>
class Tape {
 public:
  struct Record {
    std::string_view op;
    std::vector<std::shared_ptr<detail::Node<T>>> inputs;
    std::shared_ptr<detail::Node<T>> output;
    std::function<void()> backward;
  };

  struct Seed {
    Tensor<T> tensor;
    std::vector<T> grad;
  };

  Tape() = default;
  /// A tape that never records; ops still compute forward values.
  static Tape inference() {
    Tape t;
    t.enabled_ = false;
    return t;
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool enabled() const noexcept { return enabled_; }
  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<Record>& records() const noexcept { return records_; }

  /// True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const;

  void record(std::string_view op, std::initializer_list<const Tensor<T>*> inputs,
              const Tensor<T>& output, std::function<void()> backward);
  void record(std::string_view op, const std::vector<Tensor<T>>& inputs, const Tensor<T>& output,
              std::function<void()> backward);

  /// Reverse sweep from a rank-0 output produced by this tape.
  Gradients<T> backward(const Tensor<T>& scalar_output);
  /// Reverse sweep from explicit output gradients (vector-Jacobian product).
  Gradients<T> backward(std::span<const Seed> seeds);

  /// Leaves (non-produced inputs) that require grad, in first-use order.
  std::vector<Tensor<T>> leaves() const;

  /// Checks the topological-order invariant; throws StateError on violation.
  void verify() const;

  void reset();

 private:
  void run_backward();
  void prepare_backward();

  std::vector<Record> records_;
  std::unordered_set<const detail::Node<T>*> produced_;
  bool enabled_ = true;
  bool consumed_ = false;
};

extern template class Gradients<float>;
extern template class Gradients<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace schedlab::ad
