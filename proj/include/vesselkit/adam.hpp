#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vesselkit/tensor.hpp"

namespace vk::ad {

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-parameter moments, aligned with the parameter list passed to adam_step.
template <class T>
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient.
template <class T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr, const AdamParams& hp = {});

}  // namespace vk::ad
