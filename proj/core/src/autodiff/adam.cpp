#include "schedlab/autodiff/adam.hpp"

#include <cmath>

namespace schedlab::ad {

template <typename T>
AdamState<T>::AdamState(const std::vector<Tensor<T>>& params, AdamConfig config)
    : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.size(), T(0));
    v_.emplace_back(p.size(), T(0));
  }
}

template <typename T>
void AdamState<T>::reset() {
  for (auto& m : m_) std::fill(m.begin(), m.end(), T(0));
  for (auto& v : v_) std::fill(v.begin(), v.end(), T(0));
  t_ = 0;
}

template <typename T>
void AdamState<T>::step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads,
                        double lr, std::span<const std::uint8_t> active) {
  if (params.size() != m_.size() || grads.size() != m_.size() ||
      (!active.empty() && active.size() != m_.size())) {
    throw InvalidArgument("adam: parameter/gradient list does not match optimizer state");
  }
  auto is_active = [&](std::size_t i) { return active.empty() || active[i] != 0; };
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_active(i)) continue;
    if (params[i].size() != m_[i].size() || grads[i].size() != m_[i].size()) {
      throw InvalidArgument("adam: shape mismatch for parameter " + std::to_string(i));
    }
    for (T g : grads[i]) {
      if (!std::isfinite(g)) throw NonFiniteError("adam: non-finite gradient");
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  T clip = T(1);
  if (config_.grad_clip > 0.0) {
    const double norm = std::sqrt(sq);
    if (norm > config_.grad_clip) clip = static_cast<T>(config_.grad_clip / norm);
  }

  ++t_;
  const T b1 = T(config_.beta1), b2 = T(config_.beta2), eps = T(config_.eps);
  const T c1 = T(1.0 - std::pow(config_.beta1, static_cast<double>(t_)));
  const T c2 = T(1.0 - std::pow(config_.beta2, static_cast<double>(t_)));
  const T step = T(lr);
  const T decay = T(lr * config_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_active(i)) continue;
    auto p = params[i].mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = g[j] * clip;
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      p[j] -= step * mhat / (std::sqrt(vhat) + eps) + decay * p[j];
    }
  }
}

template class AdamState<float>;
template class AdamState<double>;

}  // namespace schedlab::ad
