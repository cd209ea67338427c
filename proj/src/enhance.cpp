#include "vesselkit/enhance.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vesselkit/error.hpp"
#include "vesselkit/parallel.hpp"

namespace vk {

void FrangiParams::validate() const {
    if (scales.empty()) fail(ErrorCode::config, "Frangi scale list is empty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        if (!(std::isfinite(scales[i]) && scales[i] > 0.0)) {
            fail(ErrorCode::config, "Frangi scale " + std::to_string(scales[i]) + " must be positive");
        }
        if (i > 0 && !(scales[i] > scales[i - 1])) {
            fail(ErrorCode::config, "Frangi scales must be strictly increasing");
        }
    }
    if (!(alpha > 0.0) || !(beta > 0.0)) fail(ErrorCode::config, "Frangi alpha and beta must be positive");
    if (c_mode == CMode::fixed && !(c_value > 0.0)) {
        fail(ErrorCode::config, "fixed Frangi c must be positive");
    }
}

namespace detail {

std::vector<double> derivative_kernel(double sigma_vox, int order) {
    const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma_vox));
    const double s2 = sigma_vox * sigma_vox;
    std::vector<double> g(radius + 1);
    for (std::size_t k = 0; k <= radius; ++k) {
        const auto x = static_cast<double>(k);
        g[k] = std::exp(-x * x / (2.0 * s2));
    }
    std::vector<double> w(radius + 1, 0.0);
    if (order == 0) {
        double total = g[0];
        for (std::size_t k = 1; k <= radius; ++k) total += 2.0 * g[k];
        for (std::size_t k = 0; k <= radius; ++k) w[k] = g[k] / total;
    } else if (order == 1) {
        // taps act on (f[i-k] - f[i+k]); unit response to f = x
        double moment = 0.0;
        for (std::size_t k = 1; k <= radius; ++k) {
            const auto x = static_cast<double>(k);
            w[k] = x / s2 * g[k];
            moment += 2.0 * x * w[k];
        }
        for (auto& t : w) t /= moment;
    } else {
        // taps act on (f[i-k] - f[i]) + (f[i+k] - f[i]); response 2 to f = x^2
        double moment = 0.0;
        for (std::size_t k = 1; k <= radius; ++k) {
            const auto x = static_cast<double>(k);
            w[k] = (x * x / (s2 * s2) - 1.0 / s2) * g[k];
            moment += x * x * w[k];
        }
        for (auto& t : w) t /= moment;
    }
    return w;
}

std::size_t reflect_index(long long i, std::size_t n) {
    const auto period = static_cast<long long>(2 * n);
    long long j = i % period;
    if (j < 0) j += period;
    if (j >= static_cast<long long>(n)) j = period - 1 - j;
    return static_cast<std::size_t>(j);
}

double symmetric_sum(std::span<const double> values) {
    std::array<double, 8> pos{};
    std::array<double, 8> neg{};
    std::size_t np = 0;
    std::size_t nn = 0;
    std::vector<double> pos_big;
    std::vector<double> neg_big;
    const bool small = values.size() <= pos.size();
    for (double v : values) {
        if (v > 0.0) {
            if (small) pos[np++] = v; else pos_big.push_back(v);
        } else if (v < 0.0) {
            if (small) neg[nn++] = -v; else neg_big.push_back(-v);
        }
    }
    auto ascending_sum = [](double* b, double* e) {
        std::sort(b, e);
        double s = 0.0;
        for (double* p = b; p != e; ++p) s += *p;
        return s;
    };
    if (small) {
        return ascending_sum(pos.data(), pos.data() + np) - ascending_sum(neg.data(), neg.data() + nn);
    }
    return ascending_sum(pos_big.data(), pos_big.data() + pos_big.size()) -
           ascending_sum(neg_big.data(), neg_big.data() + neg_big.size());
}

}  // namespace detail

namespace {

using Buffer = std::vector<double>;

struct AxisKernels {
    std::array<std::vector<double>, 3> taps;  // by derivative order
};

/// One 1D pass along `axis`; mirrored taps are paired so that flipping the
/// axis flips (or negates) the output exactly.
void convolve_axis(const Buffer& src, Buffer& dst, const Dims& dims, std::size_t axis,
                   const std::vector<double>& w, int order) {
    const std::size_t n = dims[axis];
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? dims.nx : dims.nx * dims.ny);
    const std::size_t lines = dims.count() / n;
    const std::size_t r = w.size() - 1;

    auto line_base = [&](std::size_t l) -> std::size_t {
        if (axis == 0) return l * dims.nx;
        if (axis == 1) return (l % dims.nx) + (l / dims.nx) * dims.nx * dims.ny;
        return l;
    };

    parallel_for(lines, [&](std::size_t lb, std::size_t le) {
        std::vector<double> ext(n + 2 * r);
        for (std::size_t l = lb; l < le; ++l) {
            const std::size_t base = line_base(l);
            for (std::size_t j = 0; j < n + 2 * r; ++j) {
                const long long src_i = static_cast<long long>(j) - static_cast<long long>(r);
                ext[j] = src[base + stride * detail::reflect_index(src_i, n)];
            }
            for (std::size_t i = 0; i < n; ++i) {
                const double* f = ext.data() + i + r;  // f[0] is sample i
                double acc = 0.0;
                if (order == 0) {
                    acc = w[0] * f[0];
                    for (std::size_t k = 1; k <= r; ++k) {
                        const auto kk = static_cast<std::ptrdiff_t>(k);
                        acc += w[k] * (f[-kk] + f[kk]);
                    }
                } else if (order == 1) {
                    for (std::size_t k = 1; k <= r; ++k) {
                        const auto kk = static_cast<std::ptrdiff_t>(k);
                        acc += w[k] * (f[-kk] - f[kk]);
                    }
                } else {
                    for (std::size_t k = 1; k <= r; ++k) {
                        const auto kk = static_cast<std::ptrdiff_t>(k);
                        acc += w[k] * ((f[-kk] - f[0]) + (f[kk] - f[0]));
                    }
                }
                dst[base + stride * i] = acc;
            }
        }
    });
}

/// Separable filter with derivative order `orders[a]` along axis a, averaged
/// over all six pass orders.
Buffer separable_symmetric(const Buffer& f, const Dims& dims, const std::array<AxisKernels, 3>& k,
                           const std::array<int, 3>& orders) {
    const std::size_t n = f.size();
    std::array<Buffer, 6> outs;
    Buffer first(n);
    Buffer second(n);
    std::size_t slot = 0;
    for (std::size_t a = 0; a < 3; ++a) {
        convolve_axis(f, first, dims, a, k[a].taps[orders[a]], orders[a]);
        for (std::size_t b = 0; b < 3; ++b) {
            if (b == a) continue;
            const std::size_t c = 3 - a - b;
            convolve_axis(first, second, dims, b, k[b].taps[orders[b]], orders[b]);
            outs[slot].resize(n);
            convolve_axis(second, outs[slot], dims, c, k[c].taps[orders[c]], orders[c]);
            ++slot;
        }
    }
    Buffer result(n);
    parallel_for(n, [&](std::size_t b, std::size_t e) {
        std::array<double, 6> vals{};
        for (std::size_t i = b; i < e; ++i) {
            for (std::size_t s = 0; s < 6; ++s) vals[s] = outs[s][i];
            result[i] = detail::symmetric_sum(vals) / 6.0;
        }
    });
    return result;
}

Volume3D to_volume(const Buffer& b, const Volume3D& like, double factor) {
    std::vector<float> out(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = static_cast<float>(b[i] * factor);
    return like.with_data(std::move(out), VolumeKind::intensity);
}

/// Product of three factors independent of their order.
double symmetric_product(double a, double b, double c) {
    std::array<double, 3> v{a, b, c};
    std::sort(v.begin(), v.end());
    return (v[0] * v[1]) * v[2];
}

bool magnitude_less(double a, double b) {
    const double fa = std::fabs(a);
    const double fb = std::fabs(b);
    return fa < fb || (fa == fb && a < b);
}

}  // namespace

HessianField gaussian_derivatives(const Volume3D& v, double sigma_mm) {
    if (!(std::isfinite(sigma_mm) && sigma_mm > 0.0)) {
        fail(ErrorCode::scale, "sigma must be positive, got " + std::to_string(sigma_mm));
    }
    std::array<AxisKernels, 3> kernels;
    for (std::size_t a = 0; a < 3; ++a) {
        const double sigma_vox = sigma_mm / v.spacing()[a];
        // the 3-sigma support must reach the neighbouring voxel, otherwise
        // the sampled derivative kernels carry no information
        if (3.0 * sigma_vox < 1.0) {
            fail(ErrorCode::scale, "sigma " + std::to_string(sigma_mm) + " mm is " + std::to_string(sigma_vox) +
                                       " voxels on axis " + std::to_string(a) +
                                       "; the kernel degenerates below 1/3 voxel");
        }
        for (int order = 0; order < 3; ++order) kernels[a].taps[order] = detail::derivative_kernel(sigma_vox, order);
    }
    const Buffer f(v.data().begin(), v.data().end());
    const Dims& d = v.dims();
    const double s2 = sigma_mm * sigma_mm;
    const Spacing& sp = v.spacing();

    HessianField h;
    h.scale = sigma_mm;
    h.xx = to_volume(separable_symmetric(f, d, kernels, {2, 0, 0}), v, s2 / (sp[0] * sp[0]));
    h.yy = to_volume(separable_symmetric(f, d, kernels, {0, 2, 0}), v, s2 / (sp[1] * sp[1]));
    h.zz = to_volume(separable_symmetric(f, d, kernels, {0, 0, 2}), v, s2 / (sp[2] * sp[2]));
    h.xy = to_volume(separable_symmetric(f, d, kernels, {1, 1, 0}), v, s2 / (sp[0] * sp[1]));
    h.xz = to_volume(separable_symmetric(f, d, kernels, {1, 0, 1}), v, s2 / (sp[0] * sp[2]));
    h.yz = to_volume(separable_symmetric(f, d, kernels, {0, 1, 1}), v, s2 / (sp[1] * sp[2]));
    return h;
}

Volume3D gaussian_smooth(const Volume3D& v, double sigma_mm) {
    if (!(std::isfinite(sigma_mm) && sigma_mm >= 0.0)) {
        fail(ErrorCode::scale, "smoothing sigma must be finite and >= 0, got " + std::to_string(sigma_mm));
    }
    if (sigma_mm == 0.0) return v;
    Buffer a(v.data().begin(), v.data().end());
    Buffer b(a.size());
    for (std::size_t axis = 0; axis < 3; ++axis) {
        convolve_axis(a, b, v.dims(), axis, detail::derivative_kernel(sigma_mm / v.spacing()[axis], 0), 0);
        std::swap(a, b);
    }
    return to_volume(a, v, 1.0);
}

Eigen3 sym3_eigenvalues(const Sym3& h) {
    const std::array<double, 6> entries{h.xx, h.yy, h.zz, h.xy, h.xz, h.yz};
    for (double e : entries) {
        if (!std::isfinite(e)) fail(ErrorCode::domain, "non-finite matrix entry");
    }
    const std::array<double, 3> diag{h.xx, h.yy, h.zz};
    const double q = detail::symmetric_sum(diag) / 3.0;
    const double b0 = h.xx - q;
    const double b1 = h.yy - q;
    const double b2 = h.zz - q;
    const std::array<double, 3> off_sq{h.xy * h.xy, h.xz * h.xz, h.yz * h.yz};
    const double p1 = detail::symmetric_sum(off_sq);
    const std::array<double, 3> diag_sq{b0 * b0, b1 * b1, b2 * b2};
    const double p2 = detail::symmetric_sum(diag_sq) + 2.0 * p1;

    std::array<double, 3> lam{q, q, q};
    if (p2 > 0.0) {
        const double off_sign = ((h.xy < 0.0) != (h.xz < 0.0)) != (h.yz < 0.0) ? -1.0 : 1.0;
        const double off_prod =
            off_sign * symmetric_product(std::fabs(h.xy), std::fabs(h.xz), std::fabs(h.yz));
        const std::array<double, 5> det_terms{symmetric_product(b0, b1, b2), 2.0 * off_prod, -b0 * off_sq[2],
                                              -b1 * off_sq[1], -b2 * off_sq[0]};
        const double det_b = detail::symmetric_sum(det_terms);
        const double p = std::sqrt(p2 / 6.0);
        const double r = std::clamp(det_b / (2.0 * p * p * p), -1.0, 1.0);
        const double phi = std::acos(r) / 3.0;
        std::array<double, 3> mu{2.0 * p * std::cos(phi), 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0),
                                 0.0};
        mu[2] = -mu[0] - mu[1];
        // Newton polish on mu^3 - 3 p^2 mu - det(B); accepted only when it helps
        const double p_sq3 = 3.0 * p * p;
        auto poly = [&](double m) { return (m * m - p_sq3) * m - det_b; };
        for (auto& m : mu) {
            for (int it = 0; it < 3; ++it) {
                const double fv = poly(m);
                const double dv = 3.0 * m * m - p_sq3;
                if (fv == 0.0 || dv == 0.0) break;
                const double cand = m - fv / dv;
                if (std::fabs(poly(cand)) < std::fabs(fv)) m = cand; else break;
            }
        }
        for (std::size_t i = 0; i < 3; ++i) lam[i] = q + mu[i];
    }
    std::sort(lam.begin(), lam.end(), magnitude_less);
    return {lam[0], lam[1], lam[2]};
}

double vesselness_voxel(const Eigen3& l, const FrangiParams& params, double c) {
    const bool polarity_ok = params.polarity == Polarity::bright_on_dark ? (l.l2 < 0.0 && l.l3 < 0.0)
                                                                         : (l.l2 > 0.0 && l.l3 > 0.0);
    if (!polarity_ok) return 0.0;
    const double a1 = std::fabs(l.l1);
    const double a2 = std::fabs(l.l2);
    const double a3 = std::fabs(l.l3);
    if (a3 == 0.0 || !(c > 0.0)) return 0.0;
    const double ra = a2 / a3;
    const double denom_b = std::sqrt(a2 * a3);
    const double rb = denom_b == 0.0 ? 0.0 : a1 / denom_b;
    const double s2 = l.l1 * l.l1 + l.l2 * l.l2 + l.l3 * l.l3;
    const double plate = 1.0 - std::exp(-(ra * ra) / (2.0 * params.alpha * params.alpha));
    const double blob = std::exp(-(rb * rb) / (2.0 * params.beta * params.beta));
    const double structure = 1.0 - std::exp(-s2 / (2.0 * c * c));
    return std::clamp(plate * blob * structure, 0.0, 1.0);
}

Volume3D frangi_multiscale(const Volume3D& v, const FrangiParams& params) {
    params.validate();
    const std::size_t n = v.size();
    std::vector<float> best(n, 0.0F);
    std::vector<Eigen3> eig(n);
    std::vector<double> norm(n);
    for (double sigma : params.scales) {
        const HessianField h = gaussian_derivatives(v, sigma);
        parallel_for(n, [&](std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) {
                eig[i] = sym3_eigenvalues(h.at(i));
                const Eigen3& l = eig[i];
                norm[i] = std::sqrt(l.l1 * l.l1 + l.l2 * l.l2 + l.l3 * l.l3);
            }
        });
        double c = params.c_value;
        if (params.c_mode == CMode::half_max_frobenius) {
            c = 0.5 * *std::max_element(norm.begin(), norm.end());
        }
        parallel_for(n, [&](std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) {
                const auto vz = static_cast<float>(vesselness_voxel(eig[i], params, c));
                best[i] = std::max(best[i], vz);
            }
        });
    }
    return v.with_data(std::move(best), VolumeKind::probability);
}

Volume3D gamma_correct(const Volume3D& v, double gamma) {
    if (!(std::isfinite(gamma) && gamma > 0.0)) fail(ErrorCode::domain, "gamma must be positive");
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float x = v[i];
        if (!(x >= 0.0F && x <= 1.0F)) {
            fail(ErrorCode::domain, "gamma correction needs values in [0,1], found " + std::to_string(x) +
                                        " (normalize first)");
        }
        out[i] = static_cast<float>(std::pow(static_cast<double>(x), gamma));
    }
    return v.with_data(std::move(out), v.kind() == VolumeKind::binary_mask ? VolumeKind::intensity : v.kind());
}

}  // namespace vk
