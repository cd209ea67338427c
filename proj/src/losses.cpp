#include "vesselkit/losses.hpp"

#include <cmath>

#include "vesselkit/error.hpp"

namespace vk {

void TverskyParams::validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(alpha + beta > 0.0)) {
        fail(ErrorCode::config, "Tversky weights need alpha >= 0, beta >= 0 and alpha + beta > 0 (got " +
                                    std::to_string(alpha) + ", " + std::to_string(beta) + ")");
    }
    if (!(eps >= 0.0) || !std::isfinite(eps)) fail(ErrorCode::config, "Tversky eps must be finite and >= 0");
}

namespace {

struct Sums {
    double tp = 0.0;
    double fp = 0.0;
    double fn = 0.0;
};

template <class T>
std::vector<Sums> accumulate(const ad::Tensor<T>& probs, const ad::Tensor<T>& target) {
    if (probs.rank() < 3 || probs.dim(1) < 1) {
        fail(ErrorCode::shape, "tversky_loss expects probs [N,C,...], got " + ad::shape_str(probs.shape()));
    }
    const std::size_t nb = probs.dim(0);
    const std::size_t c = probs.dim(1);
    const std::size_t s = probs.numel() / (nb * c);
    if (target.numel() != nb * s || target.dim(0) != nb) {
        fail(ErrorCode::shape, "target " + ad::shape_str(target.shape()) + " does not match probs " +
                                   ad::shape_str(probs.shape()));
    }
    std::vector<Sums> out(nb);
    for (std::size_t n = 0; n < nb; ++n) {
        const T* p0 = probs.data().data() + n * c * s;
        const T* g = target.data().data() + n * s;
        Sums& acc = out[n];
        for (std::size_t i = 0; i < s; ++i) {
            const double gi = g[i];
            if (gi != 0.0 && gi != 1.0) {
                fail(ErrorCode::domain, "target value " + std::to_string(gi) + " at index " + std::to_string(n * s + i) +
                                            " is not 0 or 1");
            }
            const double pi = p0[i];
            acc.tp += pi * gi;
            acc.fp += pi * (1.0 - gi);
            acc.fn += (1.0 - pi) * gi;
        }
    }
    return out;
}

double index_of(const Sums& s, const TverskyParams& p) {
    return s.tp / (s.tp + p.alpha * s.fp + p.beta * s.fn + p.eps);
}

}  // namespace

template <class T>
std::vector<double> tversky_index(const ad::Tensor<T>& probs, const ad::Tensor<T>& target, const TverskyParams& p) {
    p.validate();
    std::vector<double> out;
    for (const Sums& s : accumulate(probs, target)) out.push_back(index_of(s, p));
    return out;
}

template <class T>
ad::Tensor<T> tversky_loss(const ad::Tensor<T>& probs, const ad::Tensor<T>& target, const TverskyParams& p) {
    p.validate();
    const auto sums = accumulate(probs, target);
    const std::size_t nb = sums.size();
    double loss = 0.0;
    for (const Sums& s : sums) loss += 1.0 - index_of(s, p);
    loss /= static_cast<double>(nb);

    auto pi = probs.impl();
    auto ti = target.impl();
    return ad::make_result<T>({1}, {static_cast<T>(loss)}, {probs}, [pi, ti, sums, p, nb](const ad::TensorImpl<T>& o) {
        auto& gp = pi->grad_buffer();
        const std::size_t c = pi->shape[1];
        const std::size_t s = pi->data.size() / (nb * c);
        const double upstream = static_cast<double>(o.grad[0]) / static_cast<double>(nb);
        for (std::size_t n = 0; n < nb; ++n) {
            const Sums& sm = sums[n];
            const double den = sm.tp + p.alpha * sm.fp + p.beta * sm.fn + p.eps;
            if (den == 0.0) continue;
            const double inv2 = 1.0 / (den * den);
            // dT/dp0 = (g*den - tp*dden) / den^2 with dden = g + alpha*(1-g) - beta*g.
            const double d_vessel = (den - sm.tp * (1.0 - p.beta)) * inv2;
            const double d_background = -sm.tp * p.alpha * inv2;
            T* g0 = gp.data() + n * c * s;
            const T* g = ti->data.data() + n * s;
            for (std::size_t i = 0; i < s; ++i) {
                const double dt = g[i] != T{0} ? d_vessel : d_background;
                g0[i] += static_cast<T>(-upstream * dt);
            }
        }
    });
}

template std::vector<double> tversky_index<float>(const ad::Tensor<float>&, const ad::Tensor<float>&, const TverskyParams&);
template std::vector<double> tversky_index<double>(const ad::Tensor<double>&, const ad::Tensor<double>&,
                                                   const TverskyParams&);
template ad::Tensor<float> tversky_loss<float>(const ad::Tensor<float>&, const ad::Tensor<float>&, const TverskyParams&);
template ad::Tensor<double> tversky_loss<double>(const ad::Tensor<double>&, const ad::Tensor<double>&,
                                                 const TverskyParams&);

}  // namespace vk
