#include "vesselkit/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>
#include <type_traits>
#include <vector>

#include "vesselkit/error.hpp"

namespace vk::ad {

namespace {

void require_rank5(const Shape& s, const char* op) {
    if (s.size() != 5) fail(ErrorCode::shape, std::string(op) + " expects [N,C,D,H,W], got " + shape_str(s));
}

std::size_t spatial_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
    return n;
}

template <class T>
void cblas_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    const auto tra = ta ? CblasTrans : CblasNoTrans;
    const auto trb = tb ? CblasTrans : CblasNoTrans;
    const auto [im, in, ik] = std::tuple{static_cast<int>(m), static_cast<int>(n), static_cast<int>(k)};
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, tra, trb, im, in, ik, 1.0F, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                    beta, c, static_cast<int>(ldc));
    } else {
        cblas_dgemm(CblasRowMajor, tra, trb, im, in, ik, 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                    beta, c, static_cast<int>(ldc));
    }
}

/// C = op(A) op(B) + beta C, row major. For double, a transposed B is
/// materialized first: the OpenBLAS 0.3.20 small-matrix dgemm path returns
/// wrong results for B^T on AVX-512 cores. sgemm is unaffected and keeps the
/// native transpose, which matters for the weight-gradient products.
template <class T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T beta, T* c, std::size_t ldc) {
    if (!tb || std::is_same_v<T, float>) {
        cblas_gemm(ta, tb, m, n, k, a, lda, b, ldb, beta, c, ldc);
        return;
    }
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < k; ++i) bt[i * n + j] = b[j * ldb + i];
    }
    cblas_gemm(ta, false, m, n, k, a, lda, bt.data(), n, beta, c, ldc);
}

struct ConvGeometry {
    std::size_t cin, cout, d, h, w;
    std::size_t k, stride, pad;
    std::size_t od, oh, ow;

    [[nodiscard]] std::size_t rows() const { return cin * k * k * k; }
    [[nodiscard]] std::size_t in_plane() const { return d * h * w; }
    [[nodiscard]] std::size_t out_plane() const { return od * oh * ow; }
    [[nodiscard]] bool identity() const { return k == 1 && stride == 1 && pad == 0; }
    /// Output z-slices per im2col chunk, sized to keep the column buffer near 1 MiB.
    [[nodiscard]] std::size_t slab(std::size_t elem) const {
        const std::size_t per_slice = rows() * oh * ow * elem;
        return std::clamp<std::size_t>((std::size_t{1} << 20) / std::max<std::size_t>(per_slice, 1), 1, od);
    }
};

/// Column matrix for output slices [z0, z1): rows (ci, kd, kh, kw), columns (z, y, x).
template <class T>
void im2col(const T* x, const ConvGeometry& g, std::size_t z0, std::size_t z1, T* cols) {
    const std::size_t ncols = (z1 - z0) * g.oh * g.ow;
    const auto pad = static_cast<long long>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* xc = x + c * g.in_plane();
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                for (std::size_t kw = 0; kw < g.k; ++kw, ++row) {
                    T* out = cols + row * ncols;
                    for (std::size_t z = z0; z < z1; ++z) {
                        const long long iz = static_cast<long long>(z * g.stride + kd) - pad;
                        for (std::size_t y = 0; y < g.oh; ++y) {
                            const long long iy = static_cast<long long>(y * g.stride + kh) - pad;
                            T* o = out + ((z - z0) * g.oh + y) * g.ow;
                            if (iz < 0 || iz >= static_cast<long long>(g.d) || iy < 0 ||
                                iy >= static_cast<long long>(g.h)) {
                                std::fill(o, o + g.ow, T{0});
                                continue;
                            }
                            const T* xrow = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
                            if (g.stride == 1) {
                                const long long shift = static_cast<long long>(kw) - pad;
                                const auto lo = static_cast<std::size_t>(std::clamp<long long>(-shift, 0, static_cast<long long>(g.ow)));
                                const auto hi = static_cast<std::size_t>(std::clamp<long long>(
                                    static_cast<long long>(g.w) - shift, static_cast<long long>(lo), static_cast<long long>(g.ow)));
                                std::fill(o, o + lo, T{0});
                                std::copy(xrow + (static_cast<long long>(lo) + shift), xrow + (static_cast<long long>(hi) + shift), o + lo);
                                std::fill(o + hi, o + g.ow, T{0});
                                continue;
                            }
                            for (std::size_t xo = 0; xo < g.ow; ++xo) {
                                const long long ix = static_cast<long long>(xo * g.stride + kw) - pad;
                                o[xo] = (ix < 0 || ix >= static_cast<long long>(g.w)) ? T{0}
                                                                                       : xrow[static_cast<std::size_t>(ix)];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatters column gradients back onto the input.
template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, std::size_t z0, std::size_t z1, T* gx) {
    const std::size_t ncols = (z1 - z0) * g.oh * g.ow;
    const auto pad = static_cast<long long>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        T* gc = gx + c * g.in_plane();
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                for (std::size_t kw = 0; kw < g.k; ++kw, ++row) {
                    const T* in = cols + row * ncols;
                    for (std::size_t z = z0; z < z1; ++z) {
                        const long long iz = static_cast<long long>(z * g.stride + kd) - pad;
                        if (iz < 0 || iz >= static_cast<long long>(g.d)) continue;
                        for (std::size_t y = 0; y < g.oh; ++y) {
                            const long long iy = static_cast<long long>(y * g.stride + kh) - pad;
                            if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
                            const T* irow = in + ((z - z0) * g.oh + y) * g.ow;
                            T* grow = gc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
                            if (g.stride == 1) {
                                const long long shift = static_cast<long long>(kw) - pad;
                                const auto lo = static_cast<std::size_t>(std::clamp<long long>(-shift, 0, static_cast<long long>(g.ow)));
                                const auto hi = static_cast<std::size_t>(std::clamp<long long>(
                                    static_cast<long long>(g.w) - shift, static_cast<long long>(lo), static_cast<long long>(g.ow)));
                                T* gs = grow + shift;
                                for (std::size_t xo = lo; xo < hi; ++xo) gs[xo] += irow[xo];
                                continue;
                            }
                            for (std::size_t xo = 0; xo < g.ow; ++xo) {
                                const long long ix = static_cast<long long>(xo * g.stride + kw) - pad;
                                if (ix >= 0 && ix < static_cast<long long>(g.w)) grow[static_cast<std::size_t>(ix)] += irow[xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Index/weight table for factor-2 linear interpolation along one axis.
struct UpsampleTable {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;

    explicit UpsampleTable(std::size_t n) : i0(2 * n), i1(2 * n), w1(2 * n) {
        for (std::size_t o = 0; o < 2 * n; ++o) {
            double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
            if (src < 0.0) src = 0.0;
            const auto lo = static_cast<std::size_t>(std::floor(src));
            i0[o] = std::min(lo, n - 1);
            i1[o] = std::min(lo + 1, n - 1);
            w1[o] = src - static_cast<double>(lo);
        }
    }
};

/// Upsamples axis `axis` (2, 3 or 4) of a rank-5 buffer by two.
template <class T>
std::vector<T> upsample_axis(const std::vector<T>& in, const Shape& s, std::size_t axis) {
    const std::size_t n = s[axis];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < 5; ++a) inner *= s[a];
    std::size_t outer = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
    const UpsampleTable tab(n);
    std::vector<T> out(outer * 2 * n * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = in.data() + o * n * inner;
        T* dst = out.data() + o * 2 * n * inner;
        for (std::size_t j = 0; j < 2 * n; ++j) {
            const T w1 = static_cast<T>(tab.w1[j]);
            const T w0 = T{1} - w1;
            const T* a = src + tab.i0[j] * inner;
            const T* b = src + tab.i1[j] * inner;
            T* d = dst + j * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] = w0 * a[i] + w1 * b[i];
        }
    }
    return out;
}

/// Transpose of upsample_axis: `gout` has axis length 2*s[axis].
template <class T>
std::vector<T> upsample_axis_backward(const std::vector<T>& gout, const Shape& s, std::size_t axis) {
    const std::size_t n = s[axis];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < 5; ++a) inner *= s[a];
    std::size_t outer = 1;
    for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
    const UpsampleTable tab(n);
    std::vector<T> gin(outer * n * inner, T{0});
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = gout.data() + o * 2 * n * inner;
        T* dst = gin.data() + o * n * inner;
        for (std::size_t j = 0; j < 2 * n; ++j) {
            const T w1 = static_cast<T>(tab.w1[j]);
            const T w0 = T{1} - w1;
            const T* g = src + j * inner;
            T* a = dst + tab.i0[j] * inner;
            T* b = dst + tab.i1[j] * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                a[i] += w0 * g[i];
                b[i] += w1 * g[i];
            }
        }
    }
    return gin;
}

}  // namespace

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t padding) {
    require_rank5(x.shape(), "conv3d input");
    require_rank5(w.shape(), "conv3d weight");
    const std::size_t k = w.dim(2);
    if (w.dim(3) != k || w.dim(4) != k || k % 2 == 0) {
        fail(ErrorCode::shape, "conv3d weight must be cubic with odd size, got " + shape_str(w.shape()));
    }
    if (w.dim(1) != x.dim(1)) {
        fail(ErrorCode::shape, "conv3d channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                                   shape_str(w.shape()));
    }
    if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) {
        fail(ErrorCode::shape, "conv3d bias " + shape_str(b.shape()) + " does not match weight " +
                                   shape_str(w.shape()));
    }
    if (stride == 0) fail(ErrorCode::shape, "conv3d stride must be positive");
    for (std::size_t a = 2; a < 5; ++a) {
        if (x.dim(a) + 2 * padding < k) {
            fail(ErrorCode::shape, "conv3d kernel " + shape_str(w.shape()) + " larger than padded input " +
                                       shape_str(x.shape()));
        }
    }
    const std::size_t nb = x.dim(0);
    ConvGeometry g{x.dim(1), w.dim(0), x.dim(2), x.dim(3), x.dim(4), k, stride, padding, 0, 0, 0};
    g.od = (g.d + 2 * padding - k) / stride + 1;
    g.oh = (g.h + 2 * padding - k) / stride + 1;
    g.ow = (g.w + 2 * padding - k) / stride + 1;
    const std::size_t plane = g.out_plane();
    const std::size_t rows = g.rows();
    const std::size_t slice = g.oh * g.ow;
    const std::size_t slab = g.slab(sizeof(T));

    std::vector<T> out(nb * g.cout * plane);
    std::vector<T> cols(g.identity() ? 0 : rows * slab * slice);
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    for (std::size_t n = 0; n < nb; ++n) {
        T* yn = out.data() + n * g.cout * plane;
        for (std::size_t co = 0; co < g.cout; ++co) {
            std::fill(yn + co * plane, yn + (co + 1) * plane, b.defined() ? b.data()[co] : T{0});
        }
        const T* xn = xd + n * g.cin * g.in_plane();
        if (g.identity()) {
            gemm(false, false, g.cout, plane, rows, wd, rows, xn, plane, T{1}, yn, plane);
            continue;
        }
        for (std::size_t z0 = 0; z0 < g.od; z0 += slab) {
            const std::size_t z1 = std::min(g.od, z0 + slab);
            const std::size_t nc = (z1 - z0) * slice;
            im2col(xn, g, z0, z1, cols.data());
            gemm(false, false, g.cout, nc, rows, wd, rows, cols.data(), nc, T{1}, yn + z0 * slice, plane);
        }
    }

    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    return make_result<T>(
        {nb, g.cout, g.od, g.oh, g.ow}, std::move(out), {x, w, b}, [xi, wi, bi, g, nb](const TensorImpl<T>& o) {
            const std::size_t plane = g.out_plane();
            const std::size_t rows = g.rows();
            const std::size_t slice = g.oh * g.ow;
            const std::size_t slab = g.slab(sizeof(T));
            const bool need_w = wi->needs_grad();
            const bool need_x = xi->needs_grad();
            T* gw = need_w ? wi->grad_buffer().data() : nullptr;
            T* gx = need_x ? xi->grad_buffer().data() : nullptr;
            const T* wd = wi->data.data();
            std::vector<T> cols(g.identity() || !need_w ? 0 : rows * slab * slice);
            std::vector<T> gcols(g.identity() || !need_x ? 0 : rows * slab * slice);
            if (bi && bi->needs_grad()) {
                auto& gb = bi->grad_buffer();
                for (std::size_t co = 0; co < g.cout; ++co) {
                    double s = 0.0;
                    for (std::size_t n = 0; n < nb; ++n) {
                        const T* p = o.grad.data() + (n * g.cout + co) * plane;
                        for (std::size_t j = 0; j < plane; ++j) s += p[j];
                    }
                    gb[co] += static_cast<T>(s);
                }
            }
            for (std::size_t n = 0; n < nb; ++n) {
                const T* gy = o.grad.data() + n * g.cout * plane;
                const T* xn = xi->data.data() + n * g.cin * g.in_plane();
                T* gxn = need_x ? gx + n * g.cin * g.in_plane() : nullptr;
                if (g.identity()) {
                    if (need_w) gemm(false, true, g.cout, rows, plane, gy, plane, xn, plane, T{1}, gw, rows);
                    if (need_x) gemm(true, false, rows, plane, g.cout, wd, rows, gy, plane, T{1}, gxn, plane);
                    continue;
                }
                for (std::size_t z0 = 0; z0 < g.od; z0 += slab) {
                    const std::size_t z1 = std::min(g.od, z0 + slab);
                    const std::size_t nc = (z1 - z0) * slice;
                    const T* gyc = gy + z0 * slice;
                    if (need_w) {
                        im2col(xn, g, z0, z1, cols.data());
                        gemm(false, true, g.cout, rows, nc, gyc, plane, cols.data(), nc, T{1}, gw, rows);
                    }
                    if (need_x) {
                        gemm(true, false, rows, nc, g.cout, wd, rows, gyc, plane, T{0}, gcols.data(), nc);
                        col2im_add(gcols.data(), g, z0, z1, gxn);
                    }
                }
            }
        });
}

template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
    if (x.rank() < 2) fail(ErrorCode::shape, "group_norm expects [N,C,...], got " + shape_str(x.shape()));
    const std::size_t nb = x.dim(0);
    const std::size_t c = x.dim(1);
    if (groups == 0 || c % groups != 0) {
        fail(ErrorCode::config, "group_norm: " + std::to_string(c) + " channels not divisible into " +
                                    std::to_string(groups) + " groups");
    }
    if (gamma.numel() != c || beta.numel() != c) {
        fail(ErrorCode::shape, "group_norm affine params must have " + std::to_string(c) + " elements");
    }
    const std::size_t s = spatial_size(x.shape());
    const std::size_t cg = c / groups;
    const std::size_t m = cg * s;
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(nb * groups);
    const T* xd = x.data().data();
    for (std::size_t n = 0; n < nb; ++n) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (n * c + gi * cg) * s;
            double mean = 0.0;
            for (std::size_t i = 0; i < m; ++i) mean += xd[base + i];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double dlt = xd[base + i] - mean;
                var += dlt * dlt;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[n * groups + gi] = static_cast<T>(is);
            for (std::size_t cc = 0; cc < cg; ++cc) {
                const std::size_t ch = gi * cg + cc;
                const T ga = gamma.data()[ch];
                const T be = beta.data()[ch];
                for (std::size_t i = 0; i < s; ++i) {
                    const std::size_t idx = base + cc * s + i;
                    const T xh = static_cast<T>((xd[idx] - mean) * is);
                    xhat[idx] = xh;
                    out[idx] = xh * ga + be;
                }
            }
        }
    }
    auto xi = x.impl();
    auto gi_ = gamma.impl();
    auto bi = beta.impl();
    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                          [xi, gi_, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), nb, c, groups, s, cg,
                           m](const TensorImpl<T>& o) {
                              const T* gy = o.grad.data();
                              const bool need_x = xi->needs_grad();
                              T* gg = gi_->needs_grad() ? gi_->grad_buffer().data() : nullptr;
                              T* gb = bi->needs_grad() ? bi->grad_buffer().data() : nullptr;
                              T* gx = need_x ? xi->grad_buffer().data() : nullptr;
                              for (std::size_t n = 0; n < nb; ++n) {
                                  for (std::size_t g = 0; g < groups; ++g) {
                                      const std::size_t base = (n * c + g * cg) * s;
                                      double sum_d = 0.0;
                                      double sum_dx = 0.0;
                                      for (std::size_t cc = 0; cc < cg; ++cc) {
                                          const std::size_t ch = g * cg + cc;
                                          const double ga = gi_->data[ch];
                                          double acc_g = 0.0;
                                          double acc_b = 0.0;
                                          for (std::size_t i = 0; i < s; ++i) {
                                              const std::size_t idx = base + cc * s + i;
                                              acc_g += static_cast<double>(gy[idx]) * xhat[idx];
                                              acc_b += gy[idx];
                                              const double dxh = gy[idx] * ga;
                                              sum_d += dxh;
                                              sum_dx += dxh * xhat[idx];
                                          }
                                          if (gg) gg[ch] += static_cast<T>(acc_g);
                                          if (gb) gb[ch] += static_cast<T>(acc_b);
                                      }
                                      if (!need_x) continue;
                                      const double mean_d = sum_d / static_cast<double>(m);
                                      const double mean_dx = sum_dx / static_cast<double>(m);
                                      const double is = inv_std[n * groups + g];
                                      for (std::size_t cc = 0; cc < cg; ++cc) {
                                          const double ga = gi_->data[g * cg + cc];
                                          for (std::size_t i = 0; i < s; ++i) {
                                              const std::size_t idx = base + cc * s + i;
                                              const double dxh = gy[idx] * ga;
                                              gx[idx] += static_cast<T>(is * (dxh - mean_d - xhat[idx] * mean_dx));
                                          }
                                      }
                                  }
                              }
                          });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T{0} ? xd[i] : T{0};
    auto xi = x.impl();
    return make_result<T>(x.shape(), std::move(out), {x}, [xi](const TensorImpl<T>& o) {
        auto& gx = xi->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (xi->data[i] > T{0}) gx[i] += o.grad[i];
        }
    });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xd[i];
        if (v >= T{0}) {
            out[i] = T{1} / (T{1} + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T{1} + e);
        }
    }
    auto xi = x.impl();
    return make_result<T>(x.shape(), std::move(out), {x}, [xi](const TensorImpl<T>& o) {
        auto& gx = xi->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T y = o.data[i];
            gx[i] += o.grad[i] * y * (T{1} - y);
        }
    });
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    if (x.rank() < 2) fail(ErrorCode::shape, "softmax_channels expects [N,C,...], got " + shape_str(x.shape()));
    const std::size_t nb = x.dim(0);
    const std::size_t c = x.dim(1);
    const std::size_t s = spatial_size(x.shape());
    std::vector<T> out(x.numel());
    const T* xd = x.data().data();
    for (std::size_t n = 0; n < nb; ++n) {
        const std::size_t base = n * c * s;
        for (std::size_t i = 0; i < s; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t ch = 0; ch < c; ++ch) mx = std::max(mx, xd[base + ch * s + i]);
            T total{0};
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T e = std::exp(xd[base + ch * s + i] - mx);
                out[base + ch * s + i] = e;
                total += e;
            }
            for (std::size_t ch = 0; ch < c; ++ch) out[base + ch * s + i] /= total;
        }
    }
    auto xi = x.impl();
    return make_result<T>(x.shape(), std::move(out), {x}, [xi, nb, c, s](const TensorImpl<T>& o) {
        auto& gx = xi->grad_buffer();
        for (std::size_t n = 0; n < nb; ++n) {
            const std::size_t base = n * c * s;
            for (std::size_t i = 0; i < s; ++i) {
                T dot{0};
                for (std::size_t ch = 0; ch < c; ++ch) dot += o.grad[base + ch * s + i] * o.data[base + ch * s + i];
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t idx = base + ch * s + i;
                    gx[idx] += o.data[idx] * (o.grad[idx] - dot);
                }
            }
        }
    });
}

template <class T>
Tensor<T> maxpool3d(const Tensor<T>& x) {
    require_rank5(x.shape(), "maxpool3d");
    const std::size_t nc = x.dim(0) * x.dim(1);
    const std::size_t d = x.dim(2), h = x.dim(3), w = x.dim(4);
    if (d % 2 || h % 2 || w % 2) fail(ErrorCode::shape, "maxpool3d needs even spatial dims, got " + shape_str(x.shape()));
    const std::size_t od = d / 2, oh = h / 2, ow = w / 2;
    std::vector<T> out(nc * od * oh * ow);
    std::vector<std::size_t> arg(out.size());
    const T* xd = x.data().data();
    std::size_t oi = 0;
    for (std::size_t p = 0; p < nc; ++p) {
        const std::size_t base = p * d * h * w;
        for (std::size_t z = 0; z < od; ++z) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t xo = 0; xo < ow; ++xo, ++oi) {
                    std::size_t best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                    for (std::size_t dz = 0; dz < 2; ++dz) {
                        for (std::size_t dy = 0; dy < 2; ++dy) {
                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                const std::size_t idx = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if (xd[idx] > xd[best]) best = idx;
                            }
                        }
                    }
                    out[oi] = xd[best];
                    arg[oi] = best;
                }
            }
        }
    }
    auto xi = x.impl();
    return make_result<T>({x.dim(0), x.dim(1), od, oh, ow}, std::move(out), {x},
                          [xi, arg = std::move(arg)](const TensorImpl<T>& o) {
                              auto& gx = xi->grad_buffer();
                              for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
                          });
}

template <class T>
Tensor<T> upsample_trilinear(const Tensor<T>& x) {
    require_rank5(x.shape(), "upsample_trilinear");
    Shape s = x.shape();
    std::vector<T> cur(x.data().begin(), x.data().end());
    for (std::size_t axis = 4; axis >= 2; --axis) {
        cur = upsample_axis(cur, s, axis);
        s[axis] *= 2;
    }
    auto xi = x.impl();
    const Shape in_shape = x.shape();
    return make_result<T>(s, std::move(cur), {x}, [xi, in_shape](const TensorImpl<T>& o) {
        std::vector<T> g = o.grad;
        Shape s = o.shape;
        for (std::size_t axis = 2; axis <= 4; ++axis) {
            s[axis] /= 2;
            g = upsample_axis_backward(g, s, axis);
        }
        auto& gx = xi->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
}

template <class T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
    if (x.shape() != y.shape()) {
        fail(ErrorCode::shape, "add: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) + " differ");
    }
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + y.data()[i];
    auto xi = x.impl();
    auto yi = y.impl();
    return make_result<T>(x.shape(), std::move(out), {x, y}, [xi, yi](const TensorImpl<T>& o) {
        for (auto* t : {xi.get(), yi.get()}) {
            if (!t->needs_grad()) continue;
            auto& g = t->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
    const bool same = x.shape() == y.shape();
    bool broadcast = false;
    if (!same && x.rank() >= 2 && y.rank() == x.rank() && y.dim(1) == 1 && y.dim(0) == x.dim(0)) {
        broadcast = std::equal(x.shape().begin() + 2, x.shape().end(), y.shape().begin() + 2);
    }
    if (!same && !broadcast) {
        fail(ErrorCode::shape, "mul: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) +
                                   " are neither equal nor single-channel broadcastable");
    }
    const std::size_t nb = x.rank() >= 1 ? x.dim(0) : 1;
    const std::size_t c = same ? 1 : x.dim(1);
    const std::size_t s = same ? x.numel() / std::max<std::size_t>(nb, 1) : spatial_size(x.shape());
    // Index of the y element paired with x element i.
    auto yidx = [same, c, s](std::size_t i) { return same ? i : (i / (c * s)) * s + (i % s); };
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * y.data()[yidx(i)];
    auto xi = x.impl();
    auto yi = y.impl();
    return make_result<T>(x.shape(), std::move(out), {x, y}, [xi, yi, yidx](const TensorImpl<T>& o) {
        if (xi->needs_grad()) {
            auto& gx = xi->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * yi->data[yidx(i)];
        }
        if (yi->needs_grad()) {
            auto& gy = yi->grad_buffer();
            for (std::size_t i = 0; i < o.grad.size(); ++i) gy[yidx(i)] += o.grad[i] * xi->data[i];
        }
    });
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y) {
    if (x.rank() < 2 || x.rank() != y.rank() || x.dim(0) != y.dim(0) ||
        !std::equal(x.shape().begin() + 2, x.shape().end(), y.shape().begin() + 2)) {
        fail(ErrorCode::shape, "concat_channels: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) +
                                   " differ outside the channel axis");
    }
    const std::size_t nb = x.dim(0);
    const std::size_t bx = x.numel() / nb;
    const std::size_t by = y.numel() / nb;
    std::vector<T> out(x.numel() + y.numel());
    for (std::size_t n = 0; n < nb; ++n) {
        std::copy_n(x.data().data() + n * bx, bx, out.data() + n * (bx + by));
        std::copy_n(y.data().data() + n * by, by, out.data() + n * (bx + by) + bx);
    }
    Shape s = x.shape();
    s[1] += y.dim(1);
    auto xi = x.impl();
    auto yi = y.impl();
    return make_result<T>(s, std::move(out), {x, y}, [xi, yi, nb, bx, by](const TensorImpl<T>& o) {
        if (xi->needs_grad()) {
            auto& gx = xi->grad_buffer();
            for (std::size_t n = 0; n < nb; ++n) {
                for (std::size_t i = 0; i < bx; ++i) gx[n * bx + i] += o.grad[n * (bx + by) + i];
            }
        }
        if (yi->needs_grad()) {
            auto& gy = yi->grad_buffer();
            for (std::size_t n = 0; n < nb; ++n) {
                for (std::size_t i = 0; i < by; ++i) gy[n * by + i] += o.grad[n * (bx + by) + bx + i];
            }
        }
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T total{0};
    for (T v : x.data()) total += v;
    auto xi = x.impl();
    return make_result<T>({1}, {total}, {x}, [xi](const TensorImpl<T>& o) {
        auto& gx = xi->grad_buffer();
        for (auto& g : gx) g += o.grad[0];
    });
}

#define VK_INSTANTIATE_OPS(T)                                                                               \
    template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                 std::size_t);                                                              \
    template Tensor<T> group_norm<T>(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&,     \
                                     double);                                                               \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                           \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                        \
    template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                               \
    template Tensor<T> maxpool3d<T>(const Tensor<T>&);                                                      \
    template Tensor<T> upsample_trilinear<T>(const Tensor<T>&);                                             \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> sum<T>(const Tensor<T>&);

VK_INSTANTIATE_OPS(float)
VK_INSTANTIATE_OPS(double)

#undef VK_INSTANTIATE_OPS

}  // namespace vk::ad
