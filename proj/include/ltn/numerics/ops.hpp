#pragma once

#include <span>

#include "ltn/numerics/tape.hpp"

// Layer zoo with exact forward semantics and reverse-mode gradients.
//
// Feature maps are channels-last rank-3 tensors (H x W x C). All loops run in a
// fixed order, so results are bit-reproducible for identical inputs.
namespace ltn::nn {

/// Cross-correlation. kernel: [kh, kw, cin, cout] with odd kh, kw; bias: [cout].
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, int stride = 1, int pad = 0);

/// 2x2 max pooling, stride 2. Ties route the gradient to the first cell in row-major scan.
template <typename T>
Var max_pool2d(Tape<T>& tape, Var input);

/// Affine map of the flattened input. weight: [in, out]; bias: [out]; output: [out].
template <typename T>
Var fully_connected(Tape<T>& tape, Var input, Var weight, Var bias);

template <typename T>
Var relu(Tape<T>& tape, Var input);

/// Softmax over a rank-1 tensor.
template <typename T>
Var softmax(Tape<T>& tape, Var logits);

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b);

/// Channels [begin, end) of a rank-3 tensor.
template <typename T>
Var slice_channels(Tape<T>& tape, Var input, int begin, int end);

/// Align-corners bilinear resize of a rank-3 tensor.
template <typename T>
Var bilinear_resize(Tape<T>& tape, Var input, int out_h, int out_w);

template <typename T>
Var reshape(Tape<T>& tape, Var input, Shape shape);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var multiply(Tape<T>& tape, Var a, Var b);

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor);

/// Sum of all elements, shape [1].
template <typename T>
Var sum(Tape<T>& tape, Var a);

/// Sampling grid [out_h, out_w, 2] holding normalized source (x, y) for every
/// output cell: (x, y) = [t0 t1 t2; t3 t4 t5] * (x', y', 1), with (x', y') the
/// align-corners normalized coordinates of the output cell in [-1, 1].
template <typename T>
Var affine_grid(Tape<T>& tape, Var theta, int out_h, int out_w);

/// Bilinear sampling of `source` [H, W, C] at `grid` [Ho, Wo, 2] normalized
/// coordinates (align corners). Taps outside the source contribute zero.
template <typename T>
Var grid_sample(Tape<T>& tape, Var source, Var grid);

/// Mean of squared differences over all elements, shape [1].
template <typename T>
Var mean_squared_error(Tape<T>& tape, Var a, Var b);

/// -log(max(p[label], floor)), shape [1].
template <typename T>
Var negative_log_likelihood(Tape<T>& tape, Var probabilities, int label, T floor = T(1e-12));

/// Mean over a win_h x win_w window centred on each cell, clipped at the border
/// (the divisor is the number of in-bounds cells).
template <typename T>
Var box_mean(Tape<T>& tape, Var input, int win_h, int win_w);

/// Mean logistic loss over the selected elements of `logits`.
template <typename T>
Var sigmoid_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> indices,
                          std::span<const T> targets);

// Forward-only kernels shared by the tape ops and by code that needs no gradients.

template <typename T>
Tensor<T> resize_bilinear_values(const Tensor<T>& input, int out_h, int out_w);

/// Sample one channel-vector at fractional pixel coordinates (align corners), zero outside.
template <typename T>
void sample_bilinear_at(const Tensor<T>& source, T px, T py, std::span<T> out);

}  // namespace ltn::nn
