#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "heightbins/errors.hpp"
#include "heightbins/params.hpp"

namespace heightbins {

/// AdamW hyperparameters and per-parameter moment accumulators.
struct OptimizerState {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// One AdamW update (decoupled weight decay, bias-corrected moments).
/// Parameters that received no gradient are treated as having a zero one.
/// Throws NumericError naming the first parameter with a non-finite gradient;
/// nothing is updated in that case.
inline void optimizer_step(ParameterStore& params, OptimizerState& state) {
  for (const auto& [name, t] : params.items()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params.items()) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.size() != t.numel()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    auto w = t.mutable_data();
    const bool has_grad = t.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? t.grad()[i] : 0.0;
      w[i] -= state.lr * state.weight_decay * w[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      w[i] -= state.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
    }
  }
}

}  // namespace heightbins
