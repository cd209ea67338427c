#include "vesselkit/patching.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "vesselkit/error.hpp"
#include "vesselkit/nifti.hpp"

namespace vk {

namespace {

std::string dims_str(const Dims& d) {
    return "(" + std::to_string(d.nx) + "," + std::to_string(d.ny) + "," + std::to_string(d.nz) + ")";
}

/// Summed-volume table of a binary mask for O(1) box counts.
class IntegralVolume {
public:
    explicit IntegralVolume(const Volume3D& mask)
        : nx_(mask.dims().nx + 1), ny_(mask.dims().ny + 1), nz_(mask.dims().nz + 1), s_(nx_ * ny_ * nz_, 0) {
        const Dims& d = mask.dims();
        for (std::size_t z = 0; z < d.nz; ++z) {
            for (std::size_t y = 0; y < d.ny; ++y) {
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const std::uint64_t v = mask.at(x, y, z) != 0.0F ? 1 : 0;
                    at(x + 1, y + 1, z + 1) = v + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) + at(x + 1, y + 1, z) -
                                              at(x, y, z + 1) - at(x, y + 1, z) - at(x + 1, y, z) + at(x, y, z);
                }
            }
        }
    }

    [[nodiscard]] std::uint64_t box(const Index3& o, const Dims& size) const {
        const std::size_t x0 = o.x, y0 = o.y, z0 = o.z;
        const std::size_t x1 = o.x + size.nx, y1 = o.y + size.ny, z1 = o.z + size.nz;
        return get(x1, y1, z1) - get(x0, y1, z1) - get(x1, y0, z1) - get(x1, y1, z0) + get(x0, y0, z1) +
               get(x0, y1, z0) + get(x1, y0, z0) - get(x0, y0, z0);
    }

private:
    std::uint64_t& at(std::size_t x, std::size_t y, std::size_t z) { return s_[x + nx_ * (y + ny_ * z)]; }
    [[nodiscard]] std::uint64_t get(std::size_t x, std::size_t y, std::size_t z) const {
        return s_[x + nx_ * (y + ny_ * z)];
    }

    std::size_t nx_, ny_, nz_;
    std::vector<std::uint64_t> s_;
};

}  // namespace

std::vector<std::size_t> axis_origins(std::size_t n, std::size_t p, std::size_t d) {
    if (p == 0 || p > n) {
        fail(ErrorCode::dimension, "patch extent " + std::to_string(p) + " does not fit axis of length " +
                                       std::to_string(n));
    }
    if (d == 0 || d > p) {
        fail(ErrorCode::dimension, "stride " + std::to_string(d) + " must satisfy 0 < stride <= patch " +
                                       std::to_string(p));
    }
    std::vector<std::size_t> out;
    for (std::size_t o = 0; o + p <= n; o += d) out.push_back(o);
    if (out.back() + p < n) out.push_back(n - p);
    return out;
}

PatchGrid make_grid(const Dims& volume_dims, const Dims& patch_size, const Dims& stride) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch_size[a] > volume_dims[a]) {
            fail(ErrorCode::dimension, "patch " + dims_str(patch_size) + " larger than volume " +
                                           dims_str(volume_dims));
        }
    }
    const auto xs = axis_origins(volume_dims.nx, patch_size.nx, stride.nx);
    const auto ys = axis_origins(volume_dims.ny, patch_size.ny, stride.ny);
    const auto zs = axis_origins(volume_dims.nz, patch_size.nz, stride.nz);
    PatchGrid g{volume_dims, patch_size, stride, {}};
    g.origins.reserve(xs.size() * ys.size() * zs.size());
    for (auto x : xs) {
        for (auto y : ys) {
            for (auto z : zs) g.origins.push_back({x, y, z});
        }
    }
    return g;
}

Dims default_stride(const Dims& patch_size) {
    return {std::max<std::size_t>(1, patch_size.nx / 2), std::max<std::size_t>(1, patch_size.ny / 2),
            std::max<std::size_t>(1, patch_size.nz / 2)};
}

Volume3D extract_patch(const Volume3D& v, const Index3& origin, const Dims& size) {
    const Dims& d = v.dims();
    if (origin.x + size.nx > d.nx || origin.y + size.ny > d.ny || origin.z + size.nz > d.nz) {
        fail(ErrorCode::dimension, "patch " + dims_str(size) + " at origin out of bounds for volume " +
                                       dims_str(d));
    }
    std::vector<float> out(size.count());
    for (std::size_t z = 0; z < size.nz; ++z) {
        for (std::size_t y = 0; y < size.ny; ++y) {
            const float* src = v.data().data() + v.index(origin.x, origin.y + y, origin.z + z);
            std::copy(src, src + size.nx, out.begin() + static_cast<std::ptrdiff_t>(size.nx * (y + size.ny * z)));
        }
    }
    return Volume3D(size, v.spacing(), std::move(out), v.kind());
}

std::vector<PatchPair> sample_random_patches(const Volume3D& v, const Volume3D& labels, std::size_t n,
                                             const Dims& size, std::uint64_t seed, double fg_fraction) {
    if (labels.kind() != VolumeKind::binary_mask) fail(ErrorCode::domain, "labels must be a binary mask");
    if (labels.dims() != v.dims()) fail(ErrorCode::shape, "labels dims differ from the image");
    if (!(fg_fraction >= 0.0 && fg_fraction <= 1.0)) fail(ErrorCode::domain, "fg_fraction must lie in [0,1]");
    const Dims& d = v.dims();
    for (std::size_t a = 0; a < 3; ++a) {
        if (size[a] == 0 || size[a] > d[a]) {
            fail(ErrorCode::dimension, "patch " + dims_str(size) + " does not fit volume " + dims_str(d));
        }
    }
    const auto need_fg = static_cast<std::size_t>(std::ceil(fg_fraction * static_cast<double>(n) - 1e-12));
    const IntegralVolume integral(labels);

    std::mt19937_64 rng(seed);
    auto draw = [&](std::size_t axis) {
        std::uniform_int_distribution<std::size_t> dist(0, d[axis] - size[axis]);
        return dist(rng);
    };
    std::vector<PatchPair> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        Index3 o{draw(0), draw(1), draw(2)};
        if (k < need_fg) {
            std::size_t tries = 1;
            while (integral.box(o, size) == 0) {
                if (tries >= kSamplingRetryBudget) {
                    fail(ErrorCode::infeasible_sampling,
                         "no patch " + dims_str(size) + " with a vessel voxel found within the retry budget of " +
                             std::to_string(kSamplingRetryBudget) + " draws (patch " + std::to_string(k) + ")");
                }
                o = {draw(0), draw(1), draw(2)};
                ++tries;
            }
        }
        out.push_back({extract_patch(v, o, size), extract_patch(labels, o, size), o});
    }
    return out;
}

Volume3D stitch(const PatchGrid& grid, std::span<const Volume3D> patch_outputs) {
    if (patch_outputs.size() != grid.origins.size()) {
        fail(ErrorCode::arity, "stitch got " + std::to_string(patch_outputs.size()) + " patch outputs for " +
                                   std::to_string(grid.origins.size()) + " grid origins");
    }
    const Dims& d = grid.volume_dims;
    std::vector<double> sum(d.count(), 0.0);
    std::vector<std::uint32_t> hits(d.count(), 0);
    Spacing spacing{};
    for (std::size_t k = 0; k < patch_outputs.size(); ++k) {
        const Volume3D& p = patch_outputs[k];
        if (p.dims() != grid.patch_size) {
            fail(ErrorCode::shape, "patch output " + std::to_string(k) + " has dims " + dims_str(p.dims()) +
                                       ", expected " + dims_str(grid.patch_size));
        }
        spacing = p.spacing();
        const Index3& o = grid.origins[k];
        for (std::size_t z = 0; z < p.dims().nz; ++z) {
            for (std::size_t y = 0; y < p.dims().ny; ++y) {
                for (std::size_t x = 0; x < p.dims().nx; ++x) {
                    const std::size_t i = (o.x + x) + d.nx * ((o.y + y) + d.ny * (o.z + z));
                    sum[i] += p.at(x, y, z);
                    ++hits[i];
                }
            }
        }
    }
    std::vector<float> out(d.count());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (hits[i] == 0) fail(ErrorCode::arity, "grid leaves voxel " + std::to_string(i) + " uncovered");
        out[i] = static_cast<float>(sum[i] / hits[i]);
    }
    return Volume3D(d, spacing, std::move(out), VolumeKind::probability);
}

void save_patch_dataset(const std::filesystem::path& dir, std::span<const PatchPair> pairs) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "cannot create '" + dir.string() + "': " + ec.message());
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) fail(ErrorCode::io, "cannot write manifest in '" + dir.string() + "'");
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "patch_%05zu", k);
        const std::string image = std::string(stem) + "_image.nii";
        const std::string label = std::string(stem) + "_label.nii";
        write_nifti(pairs[k].image, dir / image);
        write_nifti(pairs[k].label, dir / label);
        const Index3& o = pairs[k].origin;
        manifest << image << ' ' << label << ' ' << o.x << ',' << o.y << ',' << o.z << '\n';
    }
}

std::vector<PatchPair> load_patch_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = std::filesystem::is_directory(dir) ? dir / "manifest.txt" : dir;
    const auto base = manifest_path.parent_path();
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorCode::io, "cannot read patch manifest '" + manifest_path.string() + "'");
    std::vector<PatchPair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string image, label, origin;
        if (!(ss >> image >> label >> origin)) {
            fail(ErrorCode::format, "patch manifest line " + std::to_string(line_no) + " is malformed");
        }
        Index3 o{};
        if (std::sscanf(origin.c_str(), "%zu,%zu,%zu", &o.x, &o.y, &o.z) != 3) {
            fail(ErrorCode::format, "bad origin on patch manifest line " + std::to_string(line_no));
        }
        out.push_back({read_nifti(base / image), read_nifti(base / label), o});
    }
    return out;
}

}  // namespace vk
