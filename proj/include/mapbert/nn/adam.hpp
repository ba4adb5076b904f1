#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mapbert/nn/tensor.hpp"

namespace mapbert::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam on one parameter array. `step` is the 1-based count of
/// the update being applied.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> first_moment, std::span<T> second_moment,
               std::int64_t step, const AdamConfig& config);

/// Adam over a fixed parameter list; owns the moment arrays.
class Adam {
 public:
  Adam(std::vector<Tensorf> params, AdamConfig config);

  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  const AdamConfig& config() const { return config_; }
  std::int64_t steps() const { return step_; }

 private:
  std::vector<Tensorf> params_;
  AdamConfig config_;
  std::int64_t step_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before scaling.
double clip_grad_norm(std::span<Tensorf> params, double max_norm);

}  // namespace mapbert::nn
