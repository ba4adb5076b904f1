#include "mapbert/nn/parameters.hpp"

#include <cmath>

namespace mapbert::nn {

Tensorf ParameterStore::add(const std::string& name, Tensorf value) {
  if (contains(name)) throw ShapeError("duplicate parameter '" + name + "'");
  Tensorf p(value.shape(), std::vector<float>(value.values().begin(), value.values().end()), true);
  entries_.emplace_back(name, p);
  return p;
}

Tensorf ParameterStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw ShapeError("unknown parameter '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

std::vector<Tensorf> ParameterStore::tensors() const {
  std::vector<Tensorf> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

Tensorf truncated_normal(Shape shape, CounterRng& rng, double stddev) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.truncated_normal(stddev));
  return Tensorf(std::move(shape), std::move(v));
}

Tensorf kaiming_uniform(Shape shape, int fan_in, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / std::max(fan_in, 1));
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensorf(std::move(shape), std::move(v));
}

}  // namespace mapbert::nn
