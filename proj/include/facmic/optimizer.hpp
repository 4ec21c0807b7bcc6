// Adam over the adapter's trainable flat vector.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "facmic/core.hpp"

namespace facmic {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.02;
  double eps = 1e-8;
  // false: L2 term added to the gradient (classic Adam).
  // true: decay applied to the weights directly, AdamW style.
  bool decoupled_weight_decay = false;
};

struct AdamState {
  std::uint64_t t = 0;
  std::vector<double> m;
  std::vector<double> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline AdamState make_adam_state(std::size_t n) {
  return AdamState{0, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
}

/// One bias-corrected Adam update, in place.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad,
                      const AdamConfig& cfg) {
  if (params.size() != grad.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw DataError("adam_step: parameter, gradient and moment lengths differ (" +
                    std::to_string(params.size()) + ", " + std::to_string(grad.size()) + ", " +
                    std::to_string(state.m.size()) + ")");
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double g = grad[i];
    if (!cfg.decoupled_weight_decay) g += cfg.weight_decay * params[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    if (cfg.decoupled_weight_decay) params[i] -= cfg.lr * cfg.weight_decay * params[i];
    params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

}  // namespace facmic
