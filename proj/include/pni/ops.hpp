#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pni/tensor.hpp"

namespace pni {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// Adds a constant, non-differentiable offset to every element.
Tensor add_constant(const Tensor& a, std::span<const double> offset);

/// x of shape [N, F, ...] plus bias of shape [F], broadcast along dim 1.
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// [m x k] * [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation of input [N x C x H x W] with kernel [F x C x kh x kw]
/// under zero padding. Output is [N x F x OH x OW] with
/// OH = (H + 2p - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params = {});

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor square(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// [N x ...] -> [N x rest].
Tensor flatten(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Per-row sum of a [N x ...] tensor, returning [N].
Tensor row_sum(const Tensor& x);

/// Mean over the batch of -log softmax(logits)[label], stabilised by
/// subtracting the row maximum.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Identity in the forward pass, zero gradient in the backward pass.
Tensor stop_gradient(const Tensor& x);

/// Row-wise argmax of a [N x K] tensor; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace pni
