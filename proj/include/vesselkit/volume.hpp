#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace vk {

enum class VolumeKind { intensity, probability, binary_mask };

std::string_view to_string(VolumeKind kind) noexcept;
VolumeKind volume_kind_from_string(std::string_view name);

struct Dims {
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::size_t nz = 0;

    [[nodiscard]] std::size_t count() const noexcept { return nx * ny * nz; }
    [[nodiscard]] std::size_t operator[](std::size_t axis) const noexcept {
        return axis == 0 ? nx : (axis == 1 ? ny : nz);
    }
    friend bool operator==(const Dims&, const Dims&) = default;
};

/// Voxel size in mm. Stored as float to match the NIfTI header field.
struct Spacing {
    float sx = 1.0F;
    float sy = 1.0F;
    float sz = 1.0F;

    [[nodiscard]] double operator[](std::size_t axis) const noexcept {
        return axis == 0 ? sx : (axis == 1 ? sy : sz);
    }
    friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Scalar 3D image, x-fastest storage. Immutable after construction; the
/// constructor enforces the kind's value-range invariant.
class Volume3D {
public:
    Volume3D() = default;
    Volume3D(Dims dims, Spacing spacing, std::vector<float> data,
             VolumeKind kind = VolumeKind::intensity);

    static Volume3D filled(Dims dims, Spacing spacing, float value,
                           VolumeKind kind = VolumeKind::intensity);

    [[nodiscard]] const Dims& dims() const noexcept { return dims_; }
    [[nodiscard]] const Spacing& spacing() const noexcept { return spacing_; }
    [[nodiscard]] VolumeKind kind() const noexcept { return kind_; }
    [[nodiscard]] std::span<const float> data() const noexcept { return data_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
        return x + dims_.nx * (y + dims_.ny * z);
    }
    [[nodiscard]] float at(std::size_t x, std::size_t y, std::size_t z) const noexcept {
        return data_[index(x, y, z)];
    }
    [[nodiscard]] float operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Same geometry, new payload and kind.
    [[nodiscard]] Volume3D with_data(std::vector<float> data, VolumeKind kind) const;

    friend bool operator==(const Volume3D&, const Volume3D&) = default;

private:
    Dims dims_{};
    Spacing spacing_{};
    std::vector<float> data_;
    VolumeKind kind_ = VolumeKind::intensity;
};

/// Thresholds a probability/intensity volume into a binary mask (value > threshold).
Volume3D threshold(const Volume3D& v, float level);

/// Count of voxels equal to 1 in a binary mask.
std::size_t count_foreground(const Volume3D& mask);

}  // namespace vk
