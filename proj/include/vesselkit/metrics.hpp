#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vesselkit/volume.hpp"

namespace vk {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    [[nodiscard]] std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(const Volume3D& pred, const Volume3D& truth);

/// Ratios are empty when their denominator is zero.
struct SegmentationMetrics {
    std::optional<double> dsc;
    std::optional<double> precision;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
};

SegmentationMetrics segmentation_metrics(const ConfusionCounts& c);

using VoxelList = std::vector<std::array<std::int32_t, 3>>;

/// Indices of the foreground voxels of a binary mask, x-fastest order.
VoxelList foreground_voxels(const Volume3D& mask);

/// Symmetric Hausdorff distance in mm between the foreground sets of two
/// masks, using voxel centres scaled by `spacing`.
double hausdorff_distance(const Volume3D& a, const Volume3D& b, const Spacing& spacing);
double hausdorff_distance(const Volume3D& a, const Volume3D& b);

namespace detail {
/// Exhaustive pairwise search.
double hausdorff_brute_force(const VoxelList& a, const VoxelList& b, const Spacing& spacing);
/// Uniform-grid search with ring pruning; returns the same value as the brute force.
double hausdorff_grid(const VoxelList& a, const VoxelList& b, const Spacing& spacing);
}  // namespace detail

/// Point sets smaller than this (|A| + |B|) use the exhaustive search.
inline constexpr std::size_t kHausdorffBruteForceLimit = 10000;

struct MetricsReport {
    std::string name;
    ConfusionCounts counts;
    SegmentationMetrics metrics;
    std::optional<double> hausdorff_mm;

    /// Tab-separated record; undefined values print as "nan".
    [[nodiscard]] std::string to_record() const;
    static std::string record_header();
};

MetricsReport evaluate(const std::string& name, const Volume3D& pred, const Volume3D& truth);

/// key=value summary with means over the defined entries.
std::map<std::string, std::string> summarize(const std::vector<MetricsReport>& reports);

}  // namespace vk
