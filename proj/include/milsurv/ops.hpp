#pragma once

// Differentiable operations over Tensor<T>. Each op computes its forward value
// immediately and, when the tape is recording and an input requires a
// gradient, appends a node whose backward adds exact vector-Jacobian products
// into the input gradients.
//
// Matrices are rank-2 [rows × cols]. Reductions over the instance axis return
// a 1 × cols row so that downstream linear layers apply unchanged.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "milsurv/rng.hpp"
#include "milsurv/tensor.hpp"

namespace milsurv::ops {

enum class Activation { relu, tanh, sigmoid, softmax };
enum class Reduce { mean, max };

Activation parse_activation(std::string_view name);
Reduce parse_reduce(std::string_view name);

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x);

/// y = x · weight + bias, weight stored [in × out]. An undefined bias is skipped.
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias = {});

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// scale · x + shift, elementwise.
template <class T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, T scale, T shift);

/// c · I − x for a square x.
template <class T>
Tensor<T> scaled_identity_minus(Tape<T>& tape, T c, const Tensor<T>& x);

/// Softmax normalizes along `axis` (0 = over rows, 1 = over columns).
template <class T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation kind, int axis = 1);

template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);
template <class T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis);

template <class T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& x);

/// Elementwise clamp; the gradient is zero where the value was clipped.
template <class T>
Tensor<T> clamp(Tape<T>& tape, const Tensor<T>& x, T lo, T hi);

/// Mean or max over the instance axis (axis 0) of an [n × q] tensor, giving
/// [1 × q]. Max routes the gradient to the first maximal row per column.
template <class T>
Tensor<T> reduce(Tape<T>& tape, const Tensor<T>& x, Reduce kind);

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x);

/// Σ|x|; the subgradient at 0 is taken as 0.
template <class T>
Tensor<T> abs_sum(Tape<T>& tape, const Tensor<T>& x);

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& shift, T eps = T(1e-5));

/// Inverted dropout: survivors are scaled by 1/(1 − rate) in training mode;
/// evaluation mode (or rate 0) returns `x` itself.
template <class T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, Rng& rng, bool training);

template <class T>
Tensor<T> concat_rows(Tape<T>& tape, std::span<const Tensor<T>> parts);
template <class T>
Tensor<T> concat_cols(Tape<T>& tape, std::span<const Tensor<T>> parts);

/// Rows of x picked by index (repeats allowed).
template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> index);

template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t start, std::size_t count);
template <class T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, std::size_t start, std::size_t count);

/// Flat element `index` of x as a scalar tensor.
template <class T>
Tensor<T> element(Tape<T>& tape, const Tensor<T>& x, std::size_t index);

/// Cumulative product along the last axis, row by row.
template <class T>
Tensor<T> cumprod(Tape<T>& tape, const Tensor<T>& x);

/// Starting point for the iterative pseudo-inverse of a square matrix:
/// xᵀ / (max_i Σ_j |x_ij| · max_j Σ_i |x_ij|).
template <class T>
Tensor<T> pinv_init(Tape<T>& tape, const Tensor<T>& x);

/// Depthwise 1-D convolution along the row (sequence) axis with zero padding
/// kernel/2 and no bias. weight is [groups × kernel]; column c of x uses
/// kernel c / group_width.
template <class T>
Tensor<T> depthwise_conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                           std::size_t group_width);

/// Depthwise 2-D convolution of an [side² × C] token grid (token t at row
/// t / side, column t % side) with per-channel kernels [C × k·k], zero padding
/// k/2, and per-channel bias [C].
template <class T>
Tensor<T> depthwise_conv2d(Tape<T>& tape, const Tensor<T>& x, std::size_t side,
                           const Tensor<T>& weight, std::size_t kernel, const Tensor<T>& bias);

}  // namespace milsurv::ops
