#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vesselkit/volume.hpp"

namespace vk::nifti {

// NIfTI-1 datatype codes accepted on read.
inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;

/// Reads a 3D single-file (.nii, .nii.gz) or paired (.hdr/.img) NIfTI-1 image.
/// Voxels are kept in file order; qform/sform are ignored. The volume kind is
/// restored from the descrip tag written by write(), otherwise intensity.
Volume3D read(const std::filesystem::path& path);

/// Parses an in-memory single-file image (already decompressed).
Volume3D decode(std::span<const std::uint8_t> bytes);

/// Binary masks are stored as uint8, everything else as float32. A path ending
/// in ".gz" is gzip-compressed.
void write(const Volume3D& v, const std::filesystem::path& path);

std::vector<std::uint8_t> encode(const Volume3D& v);

}  // namespace vk::nifti

namespace vk {

inline Volume3D read_nifti(const std::filesystem::path& path) { return nifti::read(path); }
inline void write_nifti(const Volume3D& v, const std::filesystem::path& path) { nifti::write(v, path); }

}  // namespace vk
