#pragma once

#include <array>
#include <vector>

#include "vesselkit/volume.hpp"

namespace vk {

enum class Polarity { bright_on_dark, dark_on_bright };

/// How the structureness sensitivity c is chosen at each scale.
enum class CMode { fixed, half_max_frobenius };

struct FrangiParams {
    std::vector<double> scales{0.5, 1.0, 1.5, 2.0};  // sigma in mm
    double alpha = 0.5;                              // plate/line discriminator
    double beta = 0.5;                               // blob discriminator
    CMode c_mode = CMode::half_max_frobenius;
    double c_value = 0.0;  // used when c_mode == fixed
    Polarity polarity = Polarity::bright_on_dark;

    /// Throws a config error on non-increasing scales or non-positive sensitivities.
    void validate() const;
};

/// Symmetric 3x3 matrix, off-diagonals stored once.
struct Sym3 {
    double xx = 0.0;
    double yy = 0.0;
    double zz = 0.0;
    double xy = 0.0;
    double xz = 0.0;
    double yz = 0.0;
};

/// Eigenvalues ordered |l1| <= |l2| <= |l3|; equal magnitudes put the more
/// negative value first.
struct Eigen3 {
    double l1 = 0.0;
    double l2 = 0.0;
    double l3 = 0.0;
};

/// Scale-normalized (sigma^2) Hessian of a volume at one scale.
struct HessianField {
    Volume3D xx, yy, zz, xy, xz, yz;
    double scale = 0.0;

    [[nodiscard]] Sym3 at(std::size_t i) const {
        return {xx[i], yy[i], zz[i], xy[i], xz[i], yz[i]};
    }
};

/// Second-derivative-of-Gaussian responses, sigma given in mm and converted
/// per axis through the voxel spacing. Boundaries are half-sample reflected.
///
/// Each component averages all six orders of the three separable passes and
/// every 1D pass pairs mirrored taps. As a consequence the field transforms
/// exactly (bit for bit) under axis permutations and flips of an isotropic
/// volume, which is what makes the vesselness output rotation-equivariant.
HessianField gaussian_derivatives(const Volume3D& v, double sigma_mm);

/// Separable Gaussian blur (sigma in mm, reflected boundaries). sigma 0 is the identity.
Volume3D gaussian_smooth(const Volume3D& v, double sigma_mm);

/// Closed-form eigenvalues refined by Newton steps on the characteristic
/// polynomial. Invariants are accumulated in an order-independent way so the
/// result is identical for any signed permutation of the axes.
Eigen3 sym3_eigenvalues(const Sym3& h);

/// Frangi vesselness of one eigenvalue triple, in [0,1].
double vesselness_voxel(const Eigen3& l, const FrangiParams& params, double c);

/// Maximum over scales of the per-voxel vesselness.
Volume3D frangi_multiscale(const Volume3D& v, const FrangiParams& params);

/// Per-voxel x^gamma for values already in [0,1].
Volume3D gamma_correct(const Volume3D& v, double gamma);

namespace detail {

/// 1D kernel taps w[0..r] for a given sigma in voxels. `order` 0 = smoothing,
/// 1 = first derivative (antisymmetric), 2 = second derivative (zero-sum).
std::vector<double> derivative_kernel(double sigma_vox, int order);

/// Half-sample symmetric reflection of an index into [0, n).
std::size_t reflect_index(long long i, std::size_t n);

/// Sum whose result is independent of input order and exactly negated when
/// every input is negated.
double symmetric_sum(std::span<const double> values);

}  // namespace detail

}  // namespace vk
