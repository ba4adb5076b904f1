#pragma once

// Differentiable primitives. Every function validates operand shapes and
// throws ShapeError naming them on mismatch. Instantiated for float and
// double.

#include <span>
#include <vector>

#include "mapbert/nn/tensor.hpp"

namespace mapbert::nn {

// Linear algebra -------------------------------------------------------------

/// [n, k] x [k, m] -> [n, m]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// [B, n, k] x [B, k, m] -> [B, n, m]; with transpose_b, b is [B, m, k].
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// x [..., in] * w [in, out] + bias [out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Elementwise ----------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x [..., C] + bias [C]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Forward: 1 where x > 0, else -1. Backward: identity for |x| <= 1, zero
/// outside (clipped straight-through estimator).
template <typename T>
Tensor<T> binarize_ste(const Tensor<T>& x);

// Reductions and normalisation -------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Normalises the last axis, then applies gamma [D] and beta [D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

// Layout ---------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Output axis i is input axis axes[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int length);
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis);
/// Rows `indices` of x [N, D] -> [M, D].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const int> indices);

/// table [V, D], ids -> [ids.size(), D]
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

// Convolution (NCHW) ---------------------------------------------------------

/// x [N, Ci, H, W], weight [Co, Ci, K, K], bias [Co] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1, int padding = 0);

/// x [N, Ci, H, W], weight [Ci, Co, K, K]; output side (H - 1) * stride - 2 * padding + K.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                           int padding = 0);

// Losses ---------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[target]; logits [N, K].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

inline constexpr double kBceClamp = 1e-7;

/// -mean[t log p + (1 - t) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, const Tensor<T>& target);

/// Soft IoU loss on [N, C, H, W] probabilities:
/// mean_n (1 - (1/C) sum_c I_c / U_c), I_c = sum M*P, U_c = sum (M + P - M*P).
/// A channel empty in the target with every prediction below 0.5 scores 1.
template <typename T>
Tensor<T> soft_iou_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace mapbert::nn
