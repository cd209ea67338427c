#include "vesselkit/intensity.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vesselkit/error.hpp"

namespace vk {

namespace {

double percentile_sorted(const std::vector<float>& sorted, double pct) {
    const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

}  // namespace

double percentile(std::span<const float> values, double pct) {
    if (values.empty()) fail(ErrorCode::domain, "percentile of an empty set");
    if (!(pct >= 0.0 && pct <= 100.0)) fail(ErrorCode::domain, "percentile must lie in [0,100]");
    std::vector<float> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    return percentile_sorted(sorted, pct);
}

Volume3D normalize_intensity(const Volume3D& v, double p_lo, double p_hi,
                             const std::optional<Volume3D>& brain_mask) {
    if (v.empty()) fail(ErrorCode::domain, "cannot normalize an empty volume");
    if (!(p_lo >= 0.0 && p_lo < p_hi && p_hi <= 100.0)) {
        fail(ErrorCode::domain, "percentiles must satisfy 0 <= p_lo < p_hi <= 100, got " +
                                    std::to_string(p_lo) + ", " + std::to_string(p_hi));
    }
    if (brain_mask && brain_mask->dims() != v.dims()) {
        fail(ErrorCode::shape, "brain mask dims differ from the volume");
    }
    std::vector<float> sample;
    sample.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!brain_mask || (*brain_mask)[i] != 0.0F) sample.push_back(v[i]);
    }
    if (sample.empty()) fail(ErrorCode::domain, "brain mask selects no voxels");
    std::sort(sample.begin(), sample.end());
    const double q_lo = percentile_sorted(sample, p_lo);
    const double q_hi = percentile_sorted(sample, p_hi);

    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (brain_mask && (*brain_mask)[i] == 0.0F) {
            out[i] = 0.0F;
        } else if (q_hi == q_lo) {
            out[i] = 0.5F;
        } else {
            const double t = (static_cast<double>(v[i]) - q_lo) / (q_hi - q_lo);
            out[i] = static_cast<float>(std::clamp(t, 0.0, 1.0));
        }
    }
    return v.with_data(std::move(out), VolumeKind::intensity);
}

}  // namespace vk
