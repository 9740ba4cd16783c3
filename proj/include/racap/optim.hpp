#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "racap/tensor.hpp"

namespace racap {

/// Restarting half-cosine: lr_max at the start of every period, decaying
/// toward lr_min at its end.
inline double cosine_lr(std::size_t epoch, std::size_t period, double lr_max, double lr_min) {
  require(period > 0, "cosine schedule period must be positive");
  const double phase = static_cast<double>(epoch % period) / static_cast<double>(period);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * phase));
}

struct LrSchedule {
  enum class Kind { kConstant, kCosine };
  Kind kind = Kind::kConstant;
  double lr_max = 1e-4;
  double lr_min = 1e-4;
  std::size_t period = 1;

  static LrSchedule constant(double lr) { return {Kind::kConstant, lr, lr, 1}; }
  static LrSchedule cosine(double lr_max, double lr_min, std::size_t period) {
    return {Kind::kCosine, lr_max, lr_min, period};
  }

  double at(std::size_t epoch) const {
    return kind == Kind::kConstant ? lr_max : cosine_lr(epoch, period, lr_max, lr_min);
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  LrSchedule schedule;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

/// One bias-corrected Adam update of `params` from their accumulated grads.
inline void adam_step(OptimizerState& state, std::span<Tensor> params, double lr) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  require_shape(state.first_moment.size() == params.size(),
                "optimizer state tracks " + std::to_string(state.first_moment.size()) +
                    " tensors, got " + std::to_string(params.size()));
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    require_shape(m.size() == params[k].size(), "optimizer moment shape mismatch");
    if (!params[k].has_grad()) continue;
    const auto g = params[k].grad();
    auto theta = params[k].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, LrSchedule schedule, AdamConfig config = {})
      : params_(std::move(params)) {
    state_.config = config;
    state_.schedule = schedule;
  }

  /// Applies one update using the schedule's rate for `epoch`.
  void step(std::size_t epoch) { adam_step(state_, params_, state_.schedule.at(epoch)); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const OptimizerState& state() const { return state_; }

 private:
  std::vector<Tensor> params_;
  OptimizerState state_;
};

}  // namespace racap
