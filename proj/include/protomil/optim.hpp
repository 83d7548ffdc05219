#pragma once

#include <cmath>
#include <vector>

#include "protomil/layers.hpp"

namespace protomil {

// Adam with L2 weight decay folded into the gradient (the classic, not the
// decoupled AdamW, form).
struct AdamConfig {
  double beta1 = 0.99;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Param<T>*> params, AdamConfig config);

  // One update with learning rate `lr`; gradients are left untouched.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const noexcept { return steps_; }
  const std::vector<Param<T>*>& params() const noexcept { return params_; }

 private:
  std::vector<Param<T>*> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

// lr * gamma^epoch
struct ExponentialLr {
  double base = 1e-3;
  double gamma = 0.95;
  double at(std::size_t epoch) const { return base * std::pow(gamma, static_cast<double>(epoch)); }
};

// lr * gamma^floor(epoch / step_size)
struct StepLr {
  double base = 1e-4;
  std::size_t step_size = 5;
  double gamma = 0.1;
  double at(std::size_t epoch) const {
    return base * std::pow(gamma, static_cast<double>(step_size ? epoch / step_size : 0));
  }
};

}  // namespace protomil
