#include "mapbert/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace mapbert::nn {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapMat = Eigen::Map<const MatRM<T>>;

template <typename T>
MapMat<T> as_mat(std::vector<T>& v, std::size_t offset, int rows, int cols) {
  return MapMat<T>(v.data() + offset, rows, cols);
}
template <typename T>
CMapMat<T> as_mat(const std::vector<T>& v, std::size_t offset, int rows, int cols) {
  return CMapMat<T>(v.data() + offset, rows, cols);
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}
[[noreturn]] void shape_fail(const std::string& op, const Shape& a) {
  throw ShapeError(op + ": invalid shape " + shape_str(a));
}

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined operand");
}

// Builds an output node; history is recorded only when some input requires
// gradients and recording is enabled.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto* in : inputs) node->parents.push_back(in->defined() ? in->node() : nullptr);
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}

int last_dim(const Shape& s, const char* op) {
  if (s.empty()) shape_fail(op, s);
  return s.back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(n) * m);
  as_mat(out, 0, n, m).noalias() = as_mat(a.node()->value, 0, n, k) * as_mat(b.node()->value, 0, k, m);
  return make_result<T>({n, m}, std::move(out), {&a, &b}, [n, k, m](Node<T>& self) {
    auto g = as_mat(std::as_const(self.grad), 0, n, m);
    if (wants_grad(self, 0)) {
      auto& pa = *self.parents[0];
      as_mat(pa.ensure_grad(), 0, n, k).noalias() += g * as_mat(std::as_const(self.parents[1]->value), 0, k, m).transpose();
    }
    if (wants_grad(self, 1)) {
      auto& pb = *self.parents[1];
      as_mat(pb.ensure_grad(), 0, k, m).noalias() += as_mat(std::as_const(self.parents[0]->value), 0, n, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_defined(a, "batched_matmul");
  require_defined(b, "batched_matmul");
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(transpose_b ? 2 : 1)) {
    shape_fail("batched_matmul", a.shape(), b.shape());
  }
  const int batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(transpose_b ? 1 : 2);
  const std::size_t sa = static_cast<std::size_t>(n) * k, sb = static_cast<std::size_t>(k) * m,
                    so = static_cast<std::size_t>(n) * m;
  std::vector<T> out(so * batch);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (int i = 0; i < batch; ++i) {
    auto A = as_mat(av, sa * i, n, k);
    if (transpose_b) {
      as_mat(out, so * i, n, m).noalias() = A * as_mat(bv, sb * i, m, k).transpose();
    } else {
      as_mat(out, so * i, n, m).noalias() = A * as_mat(bv, sb * i, k, m);
    }
  }
  return make_result<T>({batch, n, m}, std::move(out), {&a, &b}, [=](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const bool ga = wants_grad(self, 0), gb = wants_grad(self, 1);
    for (int i = 0; i < batch; ++i) {
      auto G = as_mat(std::as_const(self.grad), so * i, n, m);
      if (ga) {
        auto dA = as_mat(self.parents[0]->ensure_grad(), sa * i, n, k);
        if (transpose_b) {
          dA.noalias() += G * as_mat(bv, sb * i, m, k);
        } else {
          dA.noalias() += G * as_mat(bv, sb * i, k, m).transpose();
        }
      }
      if (gb) {
        auto A = as_mat(av, sa * i, n, k);
        if (transpose_b) {
          as_mat(self.parents[1]->ensure_grad(), sb * i, m, k).noalias() += G.transpose() * A;
        } else {
          as_mat(self.parents[1]->ensure_grad(), sb * i, k, m).noalias() += A.transpose() * G;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  const int in = last_dim(x.shape(), "linear");
  if (weight.rank() != 2 || weight.dim(0) != in) shape_fail("linear", x.shape(), weight.shape());
  const int out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) shape_fail("linear", weight.shape(), bias.shape());
  const int rows = static_cast<int>(x.size() / static_cast<std::size_t>(std::max(in, 1)));
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<T> out(static_cast<std::size_t>(rows) * out_dim);
  auto Y = as_mat(out, 0, rows, out_dim);
  Y.noalias() = as_mat(x.node()->value, 0, rows, in) * as_mat(weight.node()->value, 0, in, out_dim);
  if (bias.defined()) Y.rowwise() += as_mat(bias.node()->value, 0, 1, out_dim).row(0);
  return make_result<T>(std::move(shape), std::move(out), {&x, &weight, &bias}, [=](Node<T>& self) {
    auto G = as_mat(std::as_const(self.grad), 0, rows, out_dim);
    if (wants_grad(self, 0)) {
      as_mat(self.parents[0]->ensure_grad(), 0, rows, in).noalias() +=
          G * as_mat(std::as_const(self.parents[1]->value), 0, in, out_dim).transpose();
    }
    if (wants_grad(self, 1)) {
      as_mat(self.parents[1]->ensure_grad(), 0, in, out_dim).noalias() +=
          as_mat(std::as_const(self.parents[0]->value), 0, rows, in).transpose() * G;
    }
    if (self.parents[2] && wants_grad(self, 2)) {
      // Plain loops: Eigen's vectorised reductions depend on pointer alignment,
      // which would make results vary between runs.
      auto& gb = self.parents[2]->ensure_grad();
      const T* g = self.grad.data();
      for (int r = 0; r < rows; ++r)
        for (int j = 0; j < out_dim; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r) * out_dim + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

// y = f(x) with dy/dx = df(x, y) evaluated from saved input and output.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  require_defined(x, op);
  const auto& xv = x.node()->value;
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(self, p)) continue;
      auto& g = self.parents[p]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_defined(x, "add_bias");
  require_defined(bias, "add_bias");
  const int c = last_dim(x.shape(), "add_bias");
  if (bias.rank() != 1 || bias.dim(0) != c) shape_fail("add_bias", x.shape(), bias.shape());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % static_cast<std::size_t>(c)];
  return make_result<T>(x.shape(), std::move(out), {&x, &bias}, [c](Node<T>& self) {
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % static_cast<std::size_t>(c)] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> binarize_ste(const Tensor<T>& x) {
  return unary(
      x, "binarize_ste", [](T v) { return v > T(0) ? T(1) : T(-1); },
      [](T v, T) { return std::abs(v) <= T(1) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  double s = 0;  // wide accumulator keeps float sums accurate
  for (T v : x.values()) s += v;
  return make_result<T>({}, {static_cast<T>(s)}, {&x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x, "mean");
  if (x.size() == 0) shape_fail("mean", x.shape());
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require_defined(x, "softmax");
  const int k = last_dim(x.shape(), "softmax");
  if (k == 0) shape_fail("softmax", x.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(k);
  std::vector<T> out(x.size());
  const auto& xv = x.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * k;
    T* o = out.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T total(0);
    for (int j = 0; j < k; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (int j = 0; j < k; ++j) o[j] /= total;
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [rows, k](Node<T>& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * k;
      const T* g = self.grad.data() + r * k;
      T dot(0);
      for (int j = 0; j < k; ++j) dot += g[j] * y[j];
      for (int j = 0; j < k; ++j) gx[r * k + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_defined(x, "layer_norm");
  const int d = last_dim(x.shape(), "layer_norm");
  if (!gamma.defined() || !beta.defined() || gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    shape_fail("layer_norm", x.shape(), gamma.defined() ? gamma.shape() : Shape{});
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  std::vector<T> out(x.size()), xhat(x.size()), rstd(rows);
  const auto& xv = x.node()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mu(0), var(0);
    for (int j = 0; j < d; ++j) mu += in[j];
    mu /= d;
    for (int j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= d;
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gamma[static_cast<std::size_t>(j)] + beta[static_cast<std::size_t>(j)];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const auto& gv = self.parents[1]->value;
        if (wants_grad(self, 0)) {
          auto& gx = self.parents[0]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* g = self.grad.data() + r * d;
            const T* h = xhat.data() + r * d;
            T mean_dh(0), mean_dh_h(0);
            for (int j = 0; j < d; ++j) {
              const T dh = g[j] * gv[static_cast<std::size_t>(j)];
              mean_dh += dh;
              mean_dh_h += dh * h[j];
            }
            mean_dh /= d;
            mean_dh_h /= d;
            for (int j = 0; j < d; ++j) {
              const T dh = g[j] * gv[static_cast<std::size_t>(j)];
              gx[r * d + j] += rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
            }
          }
        }
        if (wants_grad(self, 1) || wants_grad(self, 2)) {
          const bool gg = wants_grad(self, 1), gb = wants_grad(self, 2);
          T* dgamma = gg ? self.parents[1]->ensure_grad().data() : nullptr;
          T* dbeta = gb ? self.parents[2]->ensure_grad().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (int j = 0; j < d; ++j) {
              const T g = self.grad[r * d + j];
              if (gg) dgamma[j] += g * xhat[r * d + j];
              if (gb) dbeta[j] += g;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  return make_result<T>(std::move(shape), x.node()->value, {&x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  require_defined(x, "permute");
  const int r = x.rank();
  std::vector<int> check = axes;
  std::sort(check.begin(), check.end());
  for (int i = 0; i < r; ++i) {
    if (static_cast<int>(check.size()) != r || check[static_cast<std::size_t>(i)] != i) {
      throw ShapeError("permute: axes do not permute shape " + shape_str(x.shape()));
    }
  }
  // in_stride[k]: input stride of output axis k.
  std::vector<std::size_t> in_strides(static_cast<std::size_t>(r)), strides_of_output_axis(static_cast<std::size_t>(r));
  std::size_t s = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] = s;
    s *= static_cast<std::size_t>(x.dim(i));
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int k = 0; k < r; ++k) {
    out_shape[static_cast<std::size_t>(k)] = x.dim(axes[static_cast<std::size_t>(k)]);
    strides_of_output_axis[static_cast<std::size_t>(k)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(k)])];
  }
  // Source offset for each output element, enumerated with an odometer.
  const std::size_t n = x.size();
  std::vector<std::size_t> src(n);
  std::vector<int> idx(static_cast<std::size_t>(r), 0);
  std::size_t off = 0;
  for (std::size_t o = 0; o < n; ++o) {
    src[o] = off;
    for (int k = r - 1; k >= 0; --k) {
      const auto ku = static_cast<std::size_t>(k);
      if (++idx[ku] < out_shape[ku]) {
        off += strides_of_output_axis[ku];
        break;
      }
      off -= strides_of_output_axis[ku] * static_cast<std::size_t>(out_shape[ku] - 1);
      idx[ku] = 0;
    }
  }
  std::vector<T> out(n);
  const auto& xv = x.node()->value;
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[src[o]];
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, [src = std::move(src)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int length) {
  require_defined(x, "slice");
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || length < 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(x.dim(i));
  const std::size_t full = static_cast<std::size_t>(x.dim(axis)) * inner;
  const std::size_t part = static_cast<std::size_t>(length) * inner;
  const std::size_t first = static_cast<std::size_t>(start) * inner;
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = length;
  std::vector<T> out(outer * part);
  const auto& xv = x.node()->value;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * full + first), part, out.begin() + static_cast<std::ptrdiff_t>(o * part));
  }
  return make_result<T>(std::move(shape), std::move(out), {&x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < part; ++i) g[o * full + first + i] += self.grad[o * part + i];
    }
  });
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  require_defined(a, "concat");
  require_defined(b, "concat");
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (b.rank() != r || axis < 0 || axis >= r) shape_fail("concat", a.shape(), b.shape());
  for (int i = 0; i < r; ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) shape_fail("concat", a.shape(), b.shape());
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(a.dim(i));
  const std::size_t na = static_cast<std::size_t>(a.dim(axis)) * inner;
  const std::size_t nb = static_cast<std::size_t>(b.dim(axis)) * inner;
  Shape shape = a.shape();
  shape[static_cast<std::size_t>(axis)] += b.dim(axis);
  std::vector<T> out(outer * (na + nb));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.node()->value.begin() + static_cast<std::ptrdiff_t>(o * na), na, out.begin() + static_cast<std::ptrdiff_t>(o * (na + nb)));
    std::copy_n(b.node()->value.begin() + static_cast<std::ptrdiff_t>(o * nb), nb,
                out.begin() + static_cast<std::ptrdiff_t>(o * (na + nb) + na));
  }
  return make_result<T>(std::move(shape), std::move(out), {&a, &b}, [=](Node<T>& self) {
    for (std::size_t o = 0; o < outer; ++o) {
      if (wants_grad(self, 0)) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < na; ++i) g[o * na + i] += self.grad[o * (na + nb) + i];
      }
      if (wants_grad(self, 1)) {
        auto& g = self.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < nb; ++i) g[o * nb + i] += self.grad[o * (na + nb) + na + i];
      }
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> indices) {
  require_defined(x, "gather_rows");
  if (x.rank() != 2) shape_fail("gather_rows", x.shape());
  const int n = x.dim(0), d = x.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<T> out(idx.size() * static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " outside " + shape_str(x.shape()));
    }
    std::copy_n(x.node()->value.begin() + static_cast<std::ptrdiff_t>(idx[r]) * d, d,
                out.begin() + static_cast<std::ptrdiff_t>(r) * d);
  }
  const int m = static_cast<int>(idx.size());
  return make_result<T>({m, d}, std::move(out), {&x}, [d, idx = std::move(idx)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[r]) * d + j] += self.grad[r * d + j];
    }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) shape_fail("embedding", table.shape());
  return gather_rows(table, ids);
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  int channels, height, width;  // image side
  int kernel, stride, padding;
  int out_h, out_w;             // column grid side

  std::size_t col_rows() const { return static_cast<std::size_t>(channels) * kernel * kernel; }
  std::size_t col_cols() const { return static_cast<std::size_t>(out_h) * out_w; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t nc = g.col_cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(c) * g.kernel + ky) * g.kernel + kx) * nc;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy * g.stride - g.padding + ky;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int x = ox * g.stride - g.padding + kx;
            row[oy * g.out_w + ox] = (y >= 0 && y < g.height && x >= 0 && x < g.width)
                                         ? img[(static_cast<std::size_t>(c) * g.height + y) * g.width + x]
                                         : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t nc = g.col_cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(c) * g.kernel + ky) * g.kernel + kx) * nc;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy * g.stride - g.padding + ky;
          if (y < 0 || y >= g.height) continue;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int x = ox * g.stride - g.padding + kx;
            if (x < 0 || x >= g.width) continue;
            img[(static_cast<std::size_t>(c) * g.height + y) * g.width + x] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_conv_bias(const Tensor<T>& bias, int channels, const char* op, const Shape& wshape) {
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != channels)) shape_fail(op, wshape, bias.shape());
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  require_defined(x, "conv2d");
  require_defined(weight, "conv2d");
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) || stride < 1 ||
      padding < 0) {
    shape_fail("conv2d", x.shape(), weight.shape());
  }
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0), k = weight.dim(2);
  check_conv_bias(bias, co, "conv2d", weight.shape());
  if (h + 2 * padding < k || w + 2 * padding < k) shape_fail("conv2d", x.shape(), weight.shape());
  const ConvGeometry geo{ci, h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1};
  const int kk = static_cast<int>(geo.col_rows());
  const int hw = static_cast<int>(geo.col_cols());
  const std::size_t in_size = static_cast<std::size_t>(ci) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(co) * hw;
  std::vector<T> out(out_size * n);
  std::vector<T> cols(geo.col_rows() * geo.col_cols());
  auto W = as_mat(weight.node()->value, 0, co, kk);
  for (int b = 0; b < n; ++b) {
    im2col(x.node()->value.data() + in_size * b, geo, cols.data());
    auto Y = as_mat(out, out_size * b, co, hw);
    Y.noalias() = W * as_mat(std::as_const(cols), 0, kk, hw);
    if (bias.defined()) Y.colwise() += as_mat(bias.node()->value, 0, co, 1).col(0);
  }
  return make_result<T>({n, co, geo.out_h, geo.out_w}, std::move(out), {&x, &weight, &bias}, [=](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    auto Wm = as_mat(std::as_const(self.parents[1]->value), 0, co, kk);
    std::vector<T> cols(geo.col_rows() * geo.col_cols());
    std::vector<T> dcols(cols.size());
    const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1), gb = self.parents[2] && wants_grad(self, 2);
    for (int b = 0; b < n; ++b) {
      auto G = as_mat(std::as_const(self.grad), out_size * b, co, hw);
      if (gw) {
        im2col(xv.data() + in_size * b, geo, cols.data());
        as_mat(self.parents[1]->ensure_grad(), 0, co, kk).noalias() += G * as_mat(std::as_const(cols), 0, kk, hw).transpose();
      }
      if (gx) {
        as_mat(dcols, 0, kk, hw).noalias() = Wm.transpose() * G;
        col2im(dcols.data(), geo, self.parents[0]->ensure_grad().data() + in_size * b);
      }
      if (gb) {
        auto& bg = self.parents[2]->ensure_grad();
        const T* g = self.grad.data() + out_size * b;
        for (int o = 0; o < co; ++o) {
          T acc(0);
          for (int k = 0; k < hw; ++k) acc += g[static_cast<std::size_t>(o) * hw + k];
          bg[static_cast<std::size_t>(o)] += acc;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  require_defined(x, "conv_transpose2d");
  require_defined(weight, "conv_transpose2d");
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(2) != weight.dim(3) || stride < 1 ||
      padding < 0) {
    shape_fail("conv_transpose2d", x.shape(), weight.shape());
  }
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(1), k = weight.dim(2);
  check_conv_bias(bias, co, "conv_transpose2d", weight.shape());
  const int oh = (h - 1) * stride - 2 * padding + k;
  const int ow = (w - 1) * stride - 2 * padding + k;
  if (oh <= 0 || ow <= 0) shape_fail("conv_transpose2d", x.shape(), weight.shape());
  // Adjoint of a convolution over the output image whose column grid is h x w.
  const ConvGeometry geo{co, oh, ow, k, stride, padding, h, w};
  const int kk = static_cast<int>(geo.col_rows());
  const int hw = h * w;
  const std::size_t in_size = static_cast<std::size_t>(ci) * hw;
  const std::size_t out_size = static_cast<std::size_t>(co) * oh * ow;
  std::vector<T> out(out_size * n, T(0));
  std::vector<T> cols(geo.col_rows() * geo.col_cols());
  auto W = as_mat(weight.node()->value, 0, ci, kk);
  for (int b = 0; b < n; ++b) {
    as_mat(cols, 0, kk, hw).noalias() = W.transpose() * as_mat(x.node()->value, in_size * b, ci, hw);
    col2im(cols.data(), geo, out.data() + out_size * b);
    if (bias.defined()) {
      for (int c = 0; c < co; ++c) {
        T* o = out.data() + out_size * b + static_cast<std::size_t>(c) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) o[i] += bias[static_cast<std::size_t>(c)];
      }
    }
  }
  return make_result<T>({n, co, oh, ow}, std::move(out), {&x, &weight, &bias}, [=](Node<T>& self) {
    auto Wm = as_mat(std::as_const(self.parents[1]->value), 0, ci, kk);
    std::vector<T> gcols(geo.col_rows() * geo.col_cols());
    const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1), gb = self.parents[2] && wants_grad(self, 2);
    for (int b = 0; b < n; ++b) {
      im2col(self.grad.data() + out_size * b, geo, gcols.data());
      auto GC = as_mat(std::as_const(gcols), 0, kk, hw);
      if (gx) as_mat(self.parents[0]->ensure_grad(), in_size * b, ci, hw).noalias() += Wm * GC;
      if (gw) {
        as_mat(self.parents[1]->ensure_grad(), 0, ci, kk).noalias() +=
            as_mat(std::as_const(self.parents[0]->value), in_size * b, ci, hw) * GC.transpose();
      }
      if (gb) {
        auto& g = self.parents[2]->ensure_grad();
        for (int c = 0; c < co; ++c) {
          const T* gi = self.grad.data() + out_size * b + static_cast<std::size_t>(c) * oh * ow;
          T s(0);
          for (int i = 0; i < oh * ow; ++i) s += gi[i];
          g[static_cast<std::size_t>(c)] += s;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(targets.size()) || logits.dim(0) == 0) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " with " + std::to_string(targets.size()) +
                     " targets");
  }
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<T> probs(logits.size());
  const auto& lv = logits.node()->value;
  double loss = 0;
  for (int r = 0; r < n; ++r) {
    if (tgt[static_cast<std::size_t>(r)] < 0 || tgt[static_cast<std::size_t>(r)] >= k) {
      throw DataError("cross_entropy: target " + std::to_string(tgt[static_cast<std::size_t>(r)]) + " at row " +
                      std::to_string(r) + " outside [0, " + std::to_string(k - 1) + "]");
    }
    const T* row = lv.data() + static_cast<std::size_t>(r) * k;
    const T mx = *std::max_element(row, row + k);
    T total(0);
    for (int j = 0; j < k; ++j) total += (probs[static_cast<std::size_t>(r) * k + j] = std::exp(row[j] - mx));
    for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(r) * k + j] /= total;
    loss += (mx + std::log(total)) - row[tgt[static_cast<std::size_t>(r)]];
  }
  loss /= n;
  return make_result<T>({}, {static_cast<T>(loss)}, {&logits}, [n, k, tgt = std::move(tgt), probs = std::move(probs)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const T s = self.grad[0] / static_cast<T>(n);
    for (int r = 0; r < n; ++r) {
      for (int j = 0; j < k; ++j) {
        const std::size_t i = static_cast<std::size_t>(r) * k + j;
        g[i] += s * (probs[i] - (j == tgt[static_cast<std::size_t>(r)] ? T(1) : T(0)));
      }
    }
  });
}

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same(pred, target, "binary_cross_entropy");
  if (pred.size() == 0) shape_fail("binary_cross_entropy", pred.shape());
  const T lo = T(kBceClamp), hi = T(1) - T(kBceClamp);
  double loss = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], lo, hi);
    const double t = target[i];
    loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  loss /= static_cast<double>(pred.size());
  return make_result<T>({}, {static_cast<T>(loss)}, {&pred, &target}, [lo, hi](Node<T>& self) {
    const auto& pv = self.parents[0]->value;
    const auto& tv = self.parents[1]->value;
    const T s = self.grad[0] / static_cast<T>(pv.size());
    if (wants_grad(self, 0)) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] < lo || pv[i] > hi) continue;
        g[i] += s * (-tv[i] / pv[i] + (T(1) - tv[i]) / (T(1) - pv[i]));
      }
    }
    if (wants_grad(self, 1)) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const T p = std::clamp(pv[i], lo, hi);
        g[i] += s * (std::log(T(1) - p) - std::log(p));
      }
    }
  });
}

template <typename T>
Tensor<T> soft_iou_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same(pred, target, "soft_iou_loss");
  if (pred.rank() != 4 || pred.size() == 0) shape_fail("soft_iou_loss", pred.shape());
  const int n = pred.dim(0), c = pred.dim(1);
  const std::size_t hw = static_cast<std::size_t>(pred.dim(2)) * pred.dim(3);
  const auto& pv = pred.node()->value;
  const auto& tv = target.node()->value;
  // Per (sample, channel): intersection, union, and whether the empty-channel
  // convention applies.
  std::vector<T> inter(static_cast<std::size_t>(n) * c), uni(inter.size());
  std::vector<std::uint8_t> fixed(inter.size(), 0);
  double loss = 0;
  for (std::size_t sc = 0; sc < inter.size(); ++sc) {
    const T* p = pv.data() + sc * hw;
    const T* t = tv.data() + sc * hw;
    double i_sum = 0, u_sum = 0;
    bool target_empty = true, pred_empty = true;
    for (std::size_t k = 0; k < hw; ++k) {
      i_sum += t[k] * p[k];
      u_sum += t[k] + p[k] - t[k] * p[k];
      target_empty = target_empty && t[k] < T(0.5);
      pred_empty = pred_empty && p[k] < T(0.5);
    }
    inter[sc] = static_cast<T>(i_sum);
    uni[sc] = static_cast<T>(u_sum);
    fixed[sc] = (target_empty && pred_empty) || u_sum <= 0;
    loss += fixed[sc] ? 1.0 : i_sum / u_sum;
  }
  loss = 1.0 - loss / static_cast<double>(inter.size());
  return make_result<T>({}, {static_cast<T>(loss)}, {&pred, &target},
                        [hw, inter = std::move(inter), uni = std::move(uni), fixed = std::move(fixed)](Node<T>& self) {
                          if (!wants_grad(self, 0)) return;
                          const auto& tv = self.parents[1]->value;
                          auto& g = self.parents[0]->ensure_grad();
                          const T s = -self.grad[0] / static_cast<T>(inter.size());
                          for (std::size_t sc = 0; sc < inter.size(); ++sc) {
                            if (fixed[sc]) continue;
                            const T u2 = uni[sc] * uni[sc];
                            for (std::size_t k = 0; k < hw; ++k) {
                              const T t = tv[sc * hw + k];
                              g[sc * hw + k] += s * (t * uni[sc] - inter[sc] * (T(1) - t)) / u2;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mse");
  auto d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------

#define MAPBERT_INSTANTIATE(T)                                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, bool);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> relu(const Tensor<T>&);                                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                            \
  template Tensor<T> gelu(const Tensor<T>&);                                                               \
  template Tensor<T> binarize_ste(const Tensor<T>&);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> softmax(const Tensor<T>&);                                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                                   \
  template Tensor<T> slice(const Tensor<T>&, int, int, int);                                               \
  template Tensor<T> concat(const Tensor<T>&, const Tensor<T>&, int);                                      \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                                  \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);               \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);     \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> soft_iou_loss(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);

MAPBERT_INSTANTIATE(float)
MAPBERT_INSTANTIATE(double)

#undef MAPBERT_INSTANTIATE

}  // namespace mapbert::nn
