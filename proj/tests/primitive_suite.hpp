#pragma once

// Random instances of every differentiable primitive, shared by the unit
// tests and the acceptance gradient suite.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mapbert/nn/grad_check.hpp"
#include "mapbert/nn/ops.hpp"
#include "mapbert/rng.hpp"

namespace mapbert::testing {

struct GradCase {
  nn::DoubleOp op;
  std::vector<nn::Tensord> inputs;
};

struct PrimitiveSpec {
  std::string name;
  bool linear;  // purely linear in each input: tolerance 1e-6, else 1e-3
  std::function<GradCase(CounterRng&)> make;
};

inline nn::Tensord random_tensor(nn::Shape shape, CounterRng& rng, bool requires_grad = true, double lo = -1.5,
                                 double hi = 1.5, double avoid = 0.0, double kink = 0.0) {
  std::vector<double> v(nn::numel(shape));
  for (auto& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (avoid > 0.0 && std::abs(x - kink) < avoid);
  }
  return nn::Tensord(std::move(shape), std::move(v), requires_grad);
}

inline int dim(CounterRng& rng, int lo = 2, int hi = 6) { return rng.range(lo, hi); }

inline std::vector<PrimitiveSpec> primitive_suite() {
  using nn::Tensord;
  using Inputs = std::vector<Tensord>;
  std::vector<PrimitiveSpec> s;
  s.push_back({"matmul", true, [](CounterRng& r) {
                 const int n = dim(r), k = dim(r), m = dim(r);
                 return GradCase{[](const Inputs& x) { return nn::matmul(x[0], x[1]); },
                                 {random_tensor({n, k}, r), random_tensor({k, m}, r)}};
               }});
  s.push_back({"batched_matmul", true, [](CounterRng& r) {
                 const int b = dim(r, 1, 3), n = dim(r), k = dim(r), m = dim(r);
                 const bool t = r.bernoulli(0.5);
                 return GradCase{[t](const Inputs& x) { return nn::batched_matmul(x[0], x[1], t); },
                                 {random_tensor({b, n, k}, r), random_tensor(t ? nn::Shape{b, m, k} : nn::Shape{b, k, m}, r)}};
               }});
  s.push_back({"linear", true, [](CounterRng& r) {
                 const int n = dim(r), i = dim(r), o = dim(r);
                 return GradCase{[](const Inputs& x) { return nn::linear(x[0], x[1], x[2]); },
                                 {random_tensor({n, i}, r), random_tensor({i, o}, r), random_tensor({o}, r)}};
               }});
  s.push_back({"add", true, [](CounterRng& r) {
                 const nn::Shape sh{dim(r), dim(r)};
                 return GradCase{[](const Inputs& x) { return nn::add(x[0], x[1]); }, {random_tensor(sh, r), random_tensor(sh, r)}};
               }});
  s.push_back({"sub", true, [](CounterRng& r) {
                 const nn::Shape sh{dim(r), dim(r)};
                 return GradCase{[](const Inputs& x) { return nn::sub(x[0], x[1]); }, {random_tensor(sh, r), random_tensor(sh, r)}};
               }});
  s.push_back({"mul", true, [](CounterRng& r) {
                 const nn::Shape sh{dim(r), dim(r)};
                 return GradCase{[](const Inputs& x) { return nn::mul(x[0], x[1]); }, {random_tensor(sh, r), random_tensor(sh, r)}};
               }});
  s.push_back({"add_bias", true, [](CounterRng& r) {
                 const int n = dim(r), c = dim(r);
                 return GradCase{[](const Inputs& x) { return nn::add_bias(x[0], x[1]); },
                                 {random_tensor({n, c}, r), random_tensor({c}, r)}};
               }});
  s.push_back({"scale", true, [](CounterRng& r) {
                 const double f = r.uniform(-2, 2);
                 return GradCase{[f](const Inputs& x) { return nn::scale(x[0], f); }, {random_tensor({dim(r), dim(r)}, r)}};
               }});
  s.push_back({"relu", false, [](CounterRng& r) {
                 return GradCase{[](const Inputs& x) { return nn::relu(x[0]); },
                                 {random_tensor({dim(r), dim(r)}, r, true, -1.5, 1.5, 1e-3, 0.0)}};
               }});
  s.push_back({"sigmoid", false, [](CounterRng& r) {
                 return GradCase{[](const Inputs& x) { return nn::sigmoid(x[0]); }, {random_tensor({dim(r), dim(r)}, r, true, -4, 4)}};
               }});
  s.push_back({"gelu", false, [](CounterRng& r) {
                 return GradCase{[](const Inputs& x) { return nn::gelu(x[0]); }, {random_tensor({dim(r), dim(r)}, r, true, -3, 3)}};
               }});
  s.push_back({"sum", true, [](CounterRng& r) {
                 return GradCase{[](const Inputs& x) { return nn::sum(x[0]); }, {random_tensor({dim(r), dim(r)}, r)}};
               }});
  s.push_back({"mean", true, [](CounterRng& r) {
                 return GradCase{[](const Inputs& x) { return nn::mean(x[0]); }, {random_tensor({dim(r), dim(r)}, r)}};
               }});
  s.push_back({"softmax", false, [](CounterRng& r) {
                 return GradCase{[](const Inputs& x) { return nn::softmax(x[0]); },
                                 {random_tensor({dim(r, 1, 3), dim(r), dim(r)}, r, true, -3, 3)}};
               }});
  s.push_back({"layer_norm", false, [](CounterRng& r) {
                 const int n = dim(r), d = dim(r, 3, 7);
                 return GradCase{[](const Inputs& x) { return nn::layer_norm(x[0], x[1], x[2]); },
                                 {random_tensor({n, d}, r), random_tensor({d}, r), random_tensor({d}, r)}};
               }});
  s.push_back({"reshape", true, [](CounterRng& r) {
                 const int a = dim(r), b = dim(r), c = dim(r);
                 return GradCase{[a, b, c](const Inputs& x) { return nn::reshape(x[0], {a * b, c}); },
                                 {random_tensor({a, b, c}, r)}};
               }});
  s.push_back({"permute", true, [](CounterRng& r) {
                 std::vector<int> axes{0, 1, 2, 3};
                 r.shuffle(axes);
                 return GradCase{[axes](const Inputs& x) { return nn::permute(x[0], axes); },
                                 {random_tensor({dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)}, r)}};
               }});
  s.push_back({"slice", true, [](CounterRng& r) {
                 const nn::Shape sh{dim(r), dim(r), dim(r)};
                 const int axis = r.range(0, 2);
                 const int start = r.range(0, sh[static_cast<std::size_t>(axis)] - 1);
                 const int len = r.range(1, sh[static_cast<std::size_t>(axis)] - start);
                 return GradCase{[=](const Inputs& x) { return nn::slice(x[0], axis, start, len); }, {random_tensor(sh, r)}};
               }});
  s.push_back({"concat", true, [](CounterRng& r) {
                 nn::Shape a{dim(r), dim(r), dim(r)};
                 const int axis = r.range(0, 2);
                 nn::Shape b = a;
                 b[static_cast<std::size_t>(axis)] = dim(r, 1, 4);
                 return GradCase{[axis](const Inputs& x) { return nn::concat(x[0], x[1], axis); },
                                 {random_tensor(a, r), random_tensor(b, r)}};
               }});
  s.push_back({"gather_rows", true, [](CounterRng& r) {
                 const int n = dim(r), d = dim(r), m = dim(r, 1, 6);
                 std::vector<int> idx(static_cast<std::size_t>(m));
                 for (auto& i : idx) i = r.range(0, n - 1);
                 return GradCase{[idx](const Inputs& x) { return nn::gather_rows(x[0], idx); }, {random_tensor({n, d}, r)}};
               }});
  s.push_back({"embedding", true, [](CounterRng& r) {
                 const int v = dim(r, 3, 6), d = dim(r), m = dim(r, 1, 6);
                 std::vector<int> ids(static_cast<std::size_t>(m));
                 for (auto& i : ids) i = r.range(0, v - 1);
                 return GradCase{[ids](const Inputs& x) { return nn::embedding(x[0], ids); }, {random_tensor({v, d}, r)}};
               }});
  s.push_back({"conv2d", true, [](CounterRng& r) {
                 const int n = dim(r, 1, 2), ci = dim(r, 1, 3), co = dim(r, 1, 3), k = dim(r, 1, 3);
                 const int stride = r.range(1, 2), pad = r.range(0, 1);
                 const int h = k + dim(r, 0, 3), w = k + dim(r, 0, 3);
                 const bool bias = r.bernoulli(0.8);
                 return GradCase{[=](const Inputs& x) { return nn::conv2d(x[0], x[1], bias ? x[2] : nn::Tensord{}, stride, pad); },
                                 {random_tensor({n, ci, h, w}, r), random_tensor({co, ci, k, k}, r), random_tensor({co}, r)}};
               }});
  s.push_back({"conv_transpose2d", true, [](CounterRng& r) {
                 const int n = dim(r, 1, 2), ci = dim(r, 1, 3), co = dim(r, 1, 3), k = dim(r, 1, 3);
                 const int stride = r.range(1, 3), pad = k > 2 ? r.range(0, 1) : 0;
                 const int h = dim(r, 1, 3), w = dim(r, 1, 3);
                 return GradCase{[=](const Inputs& x) { return nn::conv_transpose2d(x[0], x[1], x[2], stride, pad); },
                                 {random_tensor({n, ci, h, w}, r), random_tensor({ci, co, k, k}, r), random_tensor({co}, r)}};
               }});
  s.push_back({"cross_entropy", false, [](CounterRng& r) {
                 const int n = dim(r), k = dim(r);
                 std::vector<int> t(static_cast<std::size_t>(n));
                 for (auto& v : t) v = r.range(0, k - 1);
                 return GradCase{[t](const Inputs& x) { return nn::cross_entropy(x[0], t); }, {random_tensor({n, k}, r, true, -3, 3)}};
               }});
  s.push_back({"binary_cross_entropy", false, [](CounterRng& r) {
                 const nn::Shape sh{dim(r), dim(r), dim(r)};
                 auto target = random_tensor(sh, r, false, 0, 1);
                 for (auto& v : target.mutable_values()) v = v < 0.5 ? 0.0 : 1.0;
                 return GradCase{[](const Inputs& x) { return nn::binary_cross_entropy(x[0], x[1]); },
                                 {random_tensor(sh, r, true, 0.05, 0.95), target}};
               }});
  s.push_back({"soft_iou_loss", false, [](CounterRng& r) {
                 const nn::Shape sh{dim(r, 1, 2), dim(r, 2, 4), dim(r), dim(r)};
                 auto target = random_tensor(sh, r, false, 0, 1);
                 for (auto& v : target.mutable_values()) v = v < 0.3 ? 1.0 : 0.0;
                 return GradCase{[](const Inputs& x) { return nn::soft_iou_loss(x[0], x[1]); },
                                 {random_tensor(sh, r, true, 0.02, 0.98, 1e-2, 0.5), target}};
               }});
  s.push_back({"mse", false, [](CounterRng& r) {
                 const nn::Shape sh{dim(r), dim(r)};
                 return GradCase{[](const Inputs& x) { return nn::mse(x[0], x[1]); }, {random_tensor(sh, r), random_tensor(sh, r)}};
               }});
  return s;
}

}  // namespace mapbert::testing
