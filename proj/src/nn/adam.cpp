#include "mapbert/nn/adam.hpp"

#include <cmath>

namespace mapbert::nn {

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> first_moment, std::span<T> second_moment,
               std::int64_t step, const AdamConfig& config) {
  if (grads.size() != params.size() || first_moment.size() != params.size() || second_moment.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  }
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    first_moment[i] = b1 * first_moment[i] + (T(1) - b1) * g;
    second_moment[i] = b2 * second_moment[i] + (T(1) - b2) * g * g;
    const double mhat = first_moment[i] / c1;
    const double vhat = second_moment[i] / c2;
    params[i] -= static_cast<T>(config.lr * mhat / (std::sqrt(vhat) + config.eps));
  }
}

template void adam_step<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                               std::int64_t, const AdamConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                std::int64_t, const AdamConfig&);

Adam::Adam(std::vector<Tensorf> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

void Adam::step() {
  ++step_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    adam_step<float>(p.mutable_values(), p.grad(), m_[k], v_[k], step_, config_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_grad_norm(std::span<Tensorf> params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    for (float g : p.grad()) total += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0.0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      for (auto& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace mapbert::nn
