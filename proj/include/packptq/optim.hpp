#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "packptq/error.hpp"
#include "packptq/tensor.hpp"

namespace packptq {

/// lr(t) = base * 0.5 * (1 + cos(pi * t / total)), clamped to 0 past the end.
inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

struct AdamConfig {
  double base_lr = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_steps = 2000;
};

/// Adam moments for a fixed list of parameter tensors plus the cosine schedule.
class AdamState {
 public:
  AdamState(std::span<const Tensor> params, AdamConfig config) : config_(config) {
    first_.reserve(params.size());
    second_.reserve(params.size());
    for (const Tensor& p : params) {
      first_.emplace_back(p.shape(), 0.0);
      second_.emplace_back(p.shape(), 0.0);
    }
  }

  std::size_t step() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return config_; }
  double current_lr() const { return cosine_lr(config_.base_lr, step_, config_.total_steps); }
  const std::vector<Tensor>& first_moments() const noexcept { return first_; }
  const std::vector<Tensor>& second_moments() const noexcept { return second_; }

  /// One Adam update in place, using the learning rate scheduled for the current step.
  void apply(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (params.size() != first_.size() || grads.size() != first_.size()) {
      throw ShapeError("adam_step: expected " + std::to_string(first_.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].shape() != first_[i].shape() || grads[i].shape() != first_[i].shape()) {
        throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape " + to_string(params[i].shape()) +
                         " / grad " + to_string(grads[i].shape()) + " vs state " + to_string(first_[i].shape()));
      }
    }
    const double lr = current_lr();
    const double t = static_cast<double>(step_ + 1);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].data();
      auto g = grads[i].data();
      auto m = first_[i].data();
      auto v = second_[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p[j] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
    ++step_;
  }

 private:
  AdamConfig config_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::size_t step_ = 0;
};

inline void adam_step(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state) {
  state.apply(params, grads);
}

}  // namespace packptq
