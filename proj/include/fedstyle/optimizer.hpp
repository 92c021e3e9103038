#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fedstyle/errors.hpp"
#include "fedstyle/tensor.hpp"

namespace fedstyle {

// Momentum SGD with coupled weight decay and a multistep learning-rate schedule.
struct OptimizerState {
  double base_lr = 1e-3;
  double current_lr = 1e-3;
  double weight_decay = 5e-4;
  double sgd_momentum = 0.9;
  std::vector<std::size_t> milestones{20, 40};
  double gamma = 0.1;
  // Allocated on the first step to mirror the parameter shapes.
  std::vector<Tensor> velocity;

  void validate() const {
    if (!(base_lr >= 0.0)) throw ConfigError("optimizer.base_lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) {
      throw ConfigError("optimizer.momentum must be in [0, 1)");
    }
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("optimizer.gamma must be in (0, 1]");
    if (!std::is_sorted(milestones.begin(), milestones.end())) {
      throw ConfigError("optimizer.milestones must be sorted");
    }
  }
};

inline double scheduled_lr(double base_lr, double gamma, const std::vector<std::size_t>& milestones,
                           std::size_t epoch) {
  const auto passed = std::upper_bound(milestones.begin(), milestones.end(), epoch) -
                      milestones.begin();
  return base_lr * std::pow(gamma, static_cast<double>(passed));
}

inline void lr_schedule(OptimizerState& state, std::size_t epoch) {
  state.current_lr = scheduled_lr(state.base_lr, state.gamma, state.milestones, epoch);
}

// v <- mu v + (g + lambda theta); theta <- theta - lr v.
// Params is any type exposing tensors() (EncoderParams, ClassifierParams).
template <class Params>
void sgd_step(Params& params, const Params& grads, OptimizerState& state) {
  auto ps = params.tensors();
  auto gs = grads.tensors();
  if (ps.size() != gs.size()) throw ShapeError("sgd_step: parameter/gradient count mismatch");
  if (state.velocity.empty()) {
    for (const Tensor* p : ps) state.velocity.emplace_back(p->shape(), 0.0);
  }
  if (state.velocity.size() != ps.size()) throw ShapeError("sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor& p = *ps[i];
    const Tensor& g = *gs[i];
    Tensor& v = state.velocity[i];
    require_same_shape(p, g, "sgd_step");
    require_same_shape(p, v, "sgd_step velocity");
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.sgd_momentum * v[j] + (g[j] + state.weight_decay * p[j]);
      p[j] -= state.current_lr * v[j];
    }
  }
}

}  // namespace fedstyle
