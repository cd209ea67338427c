#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vesselkit/volume.hpp"

namespace vk {

using Vec3 = std::array<double, 3>;

/// Tube around a polyline centreline (world mm, voxel centre i at i*spacing).
/// The radius varies linearly with arc length from radius_start to radius_end.
struct Curve {
    std::vector<Vec3> points;
    double radius_start = 1.0;
    double radius_end = 1.0;

    [[nodiscard]] double max_radius() const { return std::max(radius_start, radius_end); }
};

struct HelixParams {
    Vec3 centre{};            // axis point level with the first centreline point
    Vec3 axis{0.0, 0.0, 1.0};  // need not be normalized
    double helix_radius = 6.0;
    double pitch = 12.0;  // mm advanced along the axis per turn
    double turns = 2.0;
    double phase = 0.0;   // radians
    std::size_t segments_per_turn = 32;
};

Curve make_helix(const HelixParams& h, double radius_start, double radius_end);

/// Two tubes sharing the junction point: trunk = from -> junction, plus a branch to each end point.
std::vector<Curve> make_bifurcation(const Vec3& from, const Vec3& junction, const Vec3& end_a, const Vec3& end_b,
                                    double trunk_radius, double junction_radius, double tip_radius);

struct PhantomSpec {
    Dims dims{64, 64, 64};
    Spacing spacing{};
    std::vector<Curve> curves;
    float background = 0.2F;
    float foreground = 0.8F;
    double blur_mm = 0.5;
    double noise_std = 0.1;
    std::uint64_t seed = 0;

    /// Throws a spec error for degenerate tubes or centrelines leaving the volume.
    void validate() const;
};

struct Phantom {
    Volume3D image;
    Volume3D truth;
};

/// Signed distance to the tube surface (distance to the centreline minus the
/// local radius) of one point, evaluated over every segment of every curve.
double tube_margin(const std::vector<Curve>& curves, const Vec3& p_mm);

/// tube_margin for every voxel, computed segment by segment inside padded
/// bounding boxes. Voxels farther than `band_mm` from every tube surface hold +inf.
std::vector<double> margin_field(const PhantomSpec& spec, double band_mm = 1.0);

Phantom generate_phantom(const PhantomSpec& spec);

/// Randomization ranges for dataset generation.
struct PhantomRanges {
    Dims dims{64, 64, 64};
    Spacing spacing{};
    std::size_t min_curves = 1;
    std::size_t max_curves = 4;
    double min_radius = 1.0;
    double max_radius = 4.0;
    double min_noise = 0.08;
    double max_noise = 0.12;
    float background = 0.2F;
    float foreground = 0.8F;
    double blur_mm = 0.5;
    /// Curves are dropped until the truth mask stays below this fraction.
    double max_foreground_fraction = 0.05;
};

/// Seeded random spec drawn from the ranges, foreground budget enforced.
PhantomSpec random_phantom_spec(const PhantomRanges& ranges, std::uint64_t seed);

enum class Split { train, val, test };
std::string_view to_string(Split s) noexcept;

struct DatasetEntry {
    std::filesystem::path image;
    std::filesystem::path label;
    Split split = Split::train;
};

/// Counts per split for n volumes: floor(n/10) validation and test, rest training.
std::array<std::size_t, 3> split_counts(std::size_t n);

/// Writes n phantom pairs and manifest.txt ("image label split" per line) to dir.
std::vector<DatasetEntry> generate_dataset(const std::filesystem::path& dir, std::size_t n,
                                           const PhantomRanges& ranges, std::uint64_t seed);

/// Reads a manifest; relative paths are resolved against its directory.
std::vector<DatasetEntry> load_manifest(const std::filesystem::path& manifest_or_dir);

/// 64-bit FNV-1a hash over a volume's voxel bytes.
std::uint64_t checksum(const Volume3D& v);

/// Well-mixed per-item seed derived from a base seed (splitmix64).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace vk
