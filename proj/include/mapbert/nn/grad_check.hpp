#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mapbert/nn/tensor.hpp"

namespace mapbert::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using DoubleOp = std::function<Tensord(const std::vector<Tensord>&)>;

/// Compares the analytic gradient of a random projection sum(op(x) * R) with
/// central differences for every element of every input that requires grad.
/// Relative error is |a - n| / max(|a|, |n|, 1e-3); the floor keeps
/// near-zero gradients from dominating through rounding noise.
GradCheckResult grad_check(const DoubleOp& op, const std::vector<Tensord>& inputs, double eps = 1e-4,
                           std::uint64_t projection_seed = 7);

}  // namespace mapbert::nn
