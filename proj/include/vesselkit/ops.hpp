#pragma once

#include "vesselkit/tensor.hpp"

// Closed operator set of the network. Volumetric tensors are [N, C, D, H, W].
namespace vk::ad {

/// Cross-correlation with bias. w is [Cout, Cin, k, k, k] with k odd, b is [Cout].
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride = 1,
                 std::size_t padding = 0);

/// Per-sample normalization over channel groups; gamma/beta are [C].
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

template <class T>
Tensor<T> relu(const Tensor<T>& x);

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Softmax over axis 1 of a [N, C, ...] tensor.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x);

/// 2x2x2 window, stride 2. Ties route the gradient to the first index.
template <class T>
Tensor<T> maxpool3d(const Tensor<T>& x);

/// Factor-2 trilinear upsampling, align_corners = false.
template <class T>
Tensor<T> upsample_trilinear(const Tensor<T>& x);

template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y);

/// Elementwise product; y may have a single channel that is broadcast over x's channels.
template <class T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y);

template <class T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y);

/// Sum of all elements as a scalar tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& x);

}  // namespace vk::ad
