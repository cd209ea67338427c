#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vesselkit/volume.hpp"

namespace vk {

struct Index3 {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t z = 0;

    friend bool operator==(const Index3&, const Index3&) = default;
    friend auto operator<=>(const Index3&, const Index3&) = default;
};

/// Tiling plan: origins on a stride lattice plus one boundary-clamped origin
/// per axis, sorted lexicographically by (x, y, z).
struct PatchGrid {
    Dims volume_dims;
    Dims patch_size;
    Dims stride;
    std::vector<Index3> origins;
};

struct PatchPair {
    Volume3D image;
    Volume3D label;
    Index3 origin;
};

/// Origins along one axis of length n for patch p and stride d.
std::vector<std::size_t> axis_origins(std::size_t n, std::size_t p, std::size_t d);

PatchGrid make_grid(const Dims& volume_dims, const Dims& patch_size, const Dims& stride);

/// patch_size/2 per axis (at least 1).
Dims default_stride(const Dims& patch_size);

Volume3D extract_patch(const Volume3D& v, const Index3& origin, const Dims& size);

/// Maximum number of candidate origins tried per patch that must contain vessel.
inline constexpr std::size_t kSamplingRetryBudget = 10000;

/// Uniformly placed patches; the first ceil(fg_fraction * n) of them are
/// rejection-sampled until they hold at least one foreground voxel.
std::vector<PatchPair> sample_random_patches(const Volume3D& v, const Volume3D& labels, std::size_t n,
                                             const Dims& size, std::uint64_t seed, double fg_fraction = 0.5);

/// Mean of all patch predictions covering each voxel.
Volume3D stitch(const PatchGrid& grid, std::span<const Volume3D> patch_outputs);

/// Writes NIfTI patch pairs and a manifest ("image label x,y,z" per line).
void save_patch_dataset(const std::filesystem::path& dir, std::span<const PatchPair> pairs);
std::vector<PatchPair> load_patch_dataset(const std::filesystem::path& dir);

}  // namespace vk
