#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mapbert/nn/tensor.hpp"
#include "mapbert/rng.hpp"

namespace mapbert::nn {

/// Named trainable tensors in registration order.
class ParameterStore {
 public:
  Tensorf add(const std::string& name, Tensorf value);
  Tensorf get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensorf>>& entries() const { return entries_; }
  std::vector<Tensorf> tensors() const;
  std::size_t element_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensorf>> entries_;
};

// Initialisers. All draw from the supplied generator in element order.

/// Truncated normal (|z| <= 2 sigma), std 0.02 by default.
Tensorf truncated_normal(Shape shape, CounterRng& rng, double stddev = 0.02);
/// Kaiming-uniform for ReLU-family fan-in: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
Tensorf kaiming_uniform(Shape shape, int fan_in, CounterRng& rng);

}  // namespace mapbert::nn
