#include "vesselkit/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vesselkit/error.hpp"

namespace vk {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::format: return "format";
        case ErrorCode::unsupported_type: return "unsupported-type";
        case ErrorCode::rank: return "rank";
        case ErrorCode::io: return "I/O";
        case ErrorCode::domain: return "domain";
        case ErrorCode::scale: return "scale";
        case ErrorCode::shape: return "shape";
        case ErrorCode::config: return "config";
        case ErrorCode::dimension: return "dimension";
        case ErrorCode::arity: return "arity";
        case ErrorCode::infeasible_sampling: return "infeasible-sampling";
        case ErrorCode::integrity: return "integrity";
        case ErrorCode::incompatible: return "incompatibility";
        case ErrorCode::spec: return "spec";
        case ErrorCode::undefined_distance: return "undefined-distance";
        case ErrorCode::non_finite: return "non-finite";
    }
    return "unknown";
}

std::string_view to_string(VolumeKind kind) noexcept {
    switch (kind) {
        case VolumeKind::intensity: return "intensity";
        case VolumeKind::probability: return "probability";
        case VolumeKind::binary_mask: return "binary-mask";
    }
    return "intensity";
}

VolumeKind volume_kind_from_string(std::string_view name) {
    if (name == "intensity") return VolumeKind::intensity;
    if (name == "probability") return VolumeKind::probability;
    if (name == "binary-mask") return VolumeKind::binary_mask;
    fail(ErrorCode::format, "unknown volume kind '" + std::string(name) + "'");
}

namespace {

void check_spacing(const Spacing& s) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (!(std::isfinite(s[a]) && s[a] > 0.0)) {
            fail(ErrorCode::domain, "spacing component " + std::to_string(a) +
                                        " must be positive and finite, got " + std::to_string(s[a]));
        }
    }
}

}  // namespace

Volume3D::Volume3D(Dims dims, Spacing spacing, std::vector<float> data, VolumeKind kind)
    : dims_(dims), spacing_(spacing), data_(std::move(data)), kind_(kind) {
    if (dims_.nx == 0 || dims_.ny == 0 || dims_.nz == 0) {
        fail(ErrorCode::dimension, "volume dims must be positive");
    }
    if (data_.size() != dims_.count()) {
        fail(ErrorCode::dimension, "data length " + std::to_string(data_.size()) +
                                       " != nx*ny*nz = " + std::to_string(dims_.count()));
    }
    check_spacing(spacing_);
    if (kind_ == VolumeKind::probability) {
        auto bad = std::find_if(data_.begin(), data_.end(),
                                [](float v) { return !(v >= 0.0F && v <= 1.0F); });
        if (bad != data_.end()) {
            fail(ErrorCode::domain, "probability volume value " + std::to_string(*bad) +
                                        " outside [0,1]");
        }
    } else if (kind_ == VolumeKind::binary_mask) {
        auto bad = std::find_if(data_.begin(), data_.end(),
                                [](float v) { return v != 0.0F && v != 1.0F; });
        if (bad != data_.end()) {
            fail(ErrorCode::domain, "binary mask value " + std::to_string(*bad) + " not in {0,1}");
        }
    }
}

Volume3D Volume3D::filled(Dims dims, Spacing spacing, float value, VolumeKind kind) {
    return Volume3D(dims, spacing, std::vector<float>(dims.count(), value), kind);
}

Volume3D Volume3D::with_data(std::vector<float> data, VolumeKind kind) const {
    return Volume3D(dims_, spacing_, std::move(data), kind);
}

Volume3D threshold(const Volume3D& v, float level) {
    std::vector<float> out(v.size());
    std::transform(v.data().begin(), v.data().end(), out.begin(),
                   [level](float x) { return x > level ? 1.0F : 0.0F; });
    return v.with_data(std::move(out), VolumeKind::binary_mask);
}

std::size_t count_foreground(const Volume3D& mask) {
    return static_cast<std::size_t>(
        std::count_if(mask.data().begin(), mask.data().end(), [](float x) { return x == 1.0F; }));
}

}  // namespace vk
