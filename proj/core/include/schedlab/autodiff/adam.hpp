#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "schedlab/autodiff/tensor.hpp"

namespace schedlab::ad {

struct AdamConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled weight decay; 0 disables.
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
};

/// Adam moments for a fixed parameter list. The learning rate is supplied
/// per step by the caller's schedule.
template <typename T>
class AdamState {
 public:
  AdamState(const std::vector<Tensor<T>>& params, AdamConfig config);

  /// One bias-corrected update; increments the step counter. When `active` is
  /// non-empty, parameters with active[i] == 0 keep their values and moments
  /// and are left out of the clipping norm.
  void step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads, double lr,
            std::span<const std::uint8_t> active = {});
  /// Zeroes both moments and the step counter.
  void reset();

  std::uint64_t t() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }
  std::span<const T> first_moment(std::size_t i) const { return m_.at(i); }
  std::span<const T> second_moment(std::size_t i) const { return v_.at(i); }

 private:
  AdamConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::uint64_t t_ = 0;
};

extern template class AdamState<float>;
extern template class AdamState<double>;

}  // namespace schedlab::ad
