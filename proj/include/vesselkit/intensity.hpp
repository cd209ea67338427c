#pragma once

#include <optional>

#include "vesselkit/volume.hpp"

namespace vk {

/// Linear-interpolated percentile of the values (same convention as numpy's
/// default). `pct` in [0,100].
double percentile(std::span<const float> values, double pct);

/// Maps the p_lo..p_hi percentile window onto [0,1] and clamps. A degenerate
/// window (q_hi == q_lo) yields an all-0.5 volume. When a brain mask is given,
/// percentiles are taken over the masked voxels and voxels outside it become 0.
Volume3D normalize_intensity(const Volume3D& v, double p_lo = 1.0, double p_hi = 99.0,
                             const std::optional<Volume3D>& brain_mask = std::nullopt);

}  // namespace vk
