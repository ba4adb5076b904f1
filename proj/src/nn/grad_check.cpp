#include "mapbert/nn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mapbert/nn/ops.hpp"
#include "mapbert/rng.hpp"

namespace mapbert::nn {

GradCheckResult grad_check(const DoubleOp& op, const std::vector<Tensord>& inputs, double eps,
                           std::uint64_t projection_seed) {
  std::vector<Tensord> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(in.clone(in.requires_grad()));

  const Tensord probe = op(leaves);
  CounterRng rng(projection_seed);
  std::vector<double> r(probe.size());
  for (auto& v : r) v = rng.normal();
  const Tensord weights(probe.shape(), r);

  auto objective = [&](const std::vector<Tensord>& xs) {
    const Tensord out = op(xs);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
    return s;
  };

  sum(mul(op(leaves), weights)).backward();

  GradCheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    if (!leaves[k].requires_grad()) continue;
    const std::vector<double> analytic(leaves[k].grad().begin(), leaves[k].grad().end());
    for (std::size_t i = 0; i < leaves[k].size(); ++i) {
      std::vector<Tensord> shifted;
      for (const auto& l : leaves) shifted.push_back(l.detach());
      const double x0 = shifted[k][i];
      shifted[k].mutable_values()[i] = x0 + eps;
      const double plus = objective(shifted);
      shifted[k].mutable_values()[i] = x0 - eps;
      const double minus = objective(shifted);
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      if (rel > result.max_rel_error) result = {rel, k, i, a, numeric};
    }
  }
  return result;
}

}  // namespace mapbert::nn
