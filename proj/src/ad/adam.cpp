#include "vesselkit/adam.hpp"

#include <cmath>

#include "vesselkit/error.hpp"

namespace vk::ad {

template <class T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr, const AdamParams& hp) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.0);
            state.v[i].assign(params[i].numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        fail(ErrorCode::shape, "optimizer state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                                   std::to_string(params.size()));
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.numel()) fail(ErrorCode::shape, "optimizer state shape mismatch at parameter " + std::to_string(i));
        const bool has = p.has_grad();
        auto data = p.data();
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double g = has ? static_cast<double>(p.grad()[j]) : 0.0;
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            data[j] = static_cast<T>(static_cast<double>(data[j]) - lr * mhat / (std::sqrt(vhat) + hp.eps));
        }
    }
}

template void adam_step<float>(std::span<Tensor<float>>, AdamState<float>&, double, const AdamParams&);
template void adam_step<double>(std::span<Tensor<double>>, AdamState<double>&, double, const AdamParams&);

}  // namespace vk::ad
