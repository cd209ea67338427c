#pragma once

#include <vector>

#include "vesselkit/tensor.hpp"

namespace vk {

struct TverskyParams {
    double alpha = 0.3;  // false-positive weight
    double beta = 0.7;   // false-negative weight
    double eps = 1e-6;

    void validate() const;
};

/// Per-sample Tversky index for channel 0 of probs [N,C,D,H,W] against a
/// 0/1 vessel target [N,1,D,H,W]. Channel 1 is taken as 1 - channel 0.
template <class T>
std::vector<double> tversky_index(const ad::Tensor<T>& probs, const ad::Tensor<T>& target, const TverskyParams& p);

/// Batch mean of 1 - T; differentiable with respect to probs.
template <class T>
ad::Tensor<T> tversky_loss(const ad::Tensor<T>& probs, const ad::Tensor<T>& target, const TverskyParams& p = {});

}  // namespace vk
