#include "vesselkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "vesselkit/error.hpp"

namespace vk {

namespace {

void require_mask(const Volume3D& v, const char* what) {
    if (v.kind() != VolumeKind::binary_mask) {
        fail(ErrorCode::domain, std::string(what) + " must be a binary mask, got " + std::string(to_string(v.kind())));
    }
}

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

double dist2(const std::array<std::int32_t, 3>& p, const std::array<std::int32_t, 3>& q, const double s[3]) {
    const double dx = static_cast<double>(p[0] - q[0]) * s[0];
    const double dy = static_cast<double>(p[1] - q[1]) * s[1];
    const double dz = static_cast<double>(p[2] - q[2]) * s[2];
    return dx * dx + dy * dy + dz * dz;
}

double directed_brute(const VoxelList& a, const VoxelList& b, const double s[3]) {
    double worst = 0.0;
    for (const auto& p : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : b) best = std::min(best, dist2(p, q, s));
        worst = std::max(worst, best);
    }
    return worst;
}

/// Buckets of B on a uniform grid of `cell`-voxel cubes.
class PointGrid {
public:
    PointGrid(const VoxelList& pts, std::int32_t cell) : cell_(cell) {
        lo_ = hi_ = pts.front();
        for (const auto& p : pts) {
            for (int a = 0; a < 3; ++a) {
                lo_[a] = std::min(lo_[a], p[a]);
                hi_[a] = std::max(hi_[a], p[a]);
            }
        }
        for (int a = 0; a < 3; ++a) n_[a] = (hi_[a] - lo_[a]) / cell_ + 1;
        start_.assign(static_cast<std::size_t>(n_[0]) * n_[1] * n_[2] + 1, 0);
        for (const auto& p : pts) ++start_[flat(cell_of(p)) + 1];
        for (std::size_t i = 1; i < start_.size(); ++i) start_[i] += start_[i - 1];
        std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
        items_.resize(pts.size());
        for (const auto& p : pts) items_[fill[flat(cell_of(p))]++] = p;
    }

    /// min squared distance from p to the stored points; stops once it is
    /// known to be <= floor (the caller only needs to know that).
    [[nodiscard]] double nearest2(const std::array<std::int32_t, 3>& p, const double s[3], double floor) const {
        std::array<std::int32_t, 3> c{};
        for (int a = 0; a < 3; ++a) c[a] = (p[a] - lo_[a]) >= 0 ? (p[a] - lo_[a]) / cell_ : -((lo_[a] - p[a] + cell_ - 1) / cell_);
        const double smin = std::min({s[0], s[1], s[2]});
        std::int32_t max_ring = 0;
        for (int a = 0; a < 3; ++a) max_ring = std::max({max_ring, std::abs(c[a]), std::abs(n_[a] - 1 - c[a])});
        double best = std::numeric_limits<double>::infinity();
        for (std::int32_t r = 0; r <= max_ring; ++r) {
            // Points in ring r lie at least (r - 1) * cell voxels away along some axis.
            const double bound = r >= 1 ? static_cast<double>(r - 1) * cell_ * smin : 0.0;
            if (bound * bound > best) break;
            scan_ring(c, r, [&](std::size_t cell_index) {
                for (std::size_t i = start_[cell_index]; i < start_[cell_index + 1]; ++i) {
                    best = std::min(best, dist2(p, items_[i], s));
                }
            });
            if (best <= floor) break;
        }
        return best;
    }

private:
    [[nodiscard]] std::array<std::int32_t, 3> cell_of(const std::array<std::int32_t, 3>& p) const {
        return {(p[0] - lo_[0]) / cell_, (p[1] - lo_[1]) / cell_, (p[2] - lo_[2]) / cell_};
    }
    [[nodiscard]] std::size_t flat(const std::array<std::int32_t, 3>& c) const {
        return static_cast<std::size_t>(c[0]) + static_cast<std::size_t>(n_[0]) * (c[1] + static_cast<std::size_t>(n_[1]) * c[2]);
    }

    template <class F>
    void scan_ring(const std::array<std::int32_t, 3>& c, std::int32_t r, F&& visit) const {
        const std::int32_t z0 = std::max(c[2] - r, 0), z1 = std::min(c[2] + r, n_[2] - 1);
        const std::int32_t y0 = std::max(c[1] - r, 0), y1 = std::min(c[1] + r, n_[1] - 1);
        const std::int32_t x0 = std::max(c[0] - r, 0), x1 = std::min(c[0] + r, n_[0] - 1);
        for (std::int32_t z = z0; z <= z1; ++z) {
            const bool zface = std::abs(z - c[2]) == r;
            for (std::int32_t y = y0; y <= y1; ++y) {
                const bool yface = zface || std::abs(y - c[1]) == r;
                if (yface) {
                    for (std::int32_t x = x0; x <= x1; ++x) visit(flat({x, y, z}));
                } else {
                    if (c[0] - r >= 0 && c[0] - r < n_[0]) visit(flat({c[0] - r, y, z}));
                    if (r > 0 && c[0] + r >= 0 && c[0] + r < n_[0]) visit(flat({c[0] + r, y, z}));
                }
            }
        }
    }

    std::int32_t cell_;
    std::array<std::int32_t, 3> lo_{}, hi_{}, n_{};
    std::vector<std::size_t> start_;
    VoxelList items_;
};

double directed_grid(const VoxelList& a, const PointGrid& grid, const double s[3]) {
    double worst = 0.0;
    for (const auto& p : a) worst = std::max(worst, grid.nearest2(p, s, worst));
    return worst;
}

std::string fmt(const std::optional<double>& v) {
    if (!v) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

}  // namespace

ConfusionCounts confusion(const Volume3D& pred, const Volume3D& truth) {
    require_mask(pred, "prediction");
    require_mask(truth, "truth");
    if (pred.dims() != truth.dims()) {
        fail(ErrorCode::shape, "prediction " + std::to_string(pred.dims().nx) + "x" + std::to_string(pred.dims().ny) +
                                   "x" + std::to_string(pred.dims().nz) + " vs truth " +
                                   std::to_string(truth.dims().nx) + "x" + std::to_string(truth.dims().ny) + "x" +
                                   std::to_string(truth.dims().nz));
    }
    ConfusionCounts c;
    const auto p = pred.data();
    const auto t = truth.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pp = p[i] != 0.0F;
        const bool tt = t[i] != 0.0F;
        if (pp && tt) {
            ++c.tp;
        } else if (pp) {
            ++c.fp;
        } else if (tt) {
            ++c.fn;
        } else {
            ++c.tn;
        }
    }
    return c;
}

SegmentationMetrics segmentation_metrics(const ConfusionCounts& c) {
    return {ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn), ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn),
            ratio(c.tn, c.tn + c.fp)};
}

VoxelList foreground_voxels(const Volume3D& mask) {
    require_mask(mask, "mask");
    VoxelList out;
    const Dims& d = mask.dims();
    for (std::size_t z = 0; z < d.nz; ++z) {
        for (std::size_t y = 0; y < d.ny; ++y) {
            for (std::size_t x = 0; x < d.nx; ++x) {
                if (mask.at(x, y, z) != 0.0F) {
                    out.push_back({static_cast<std::int32_t>(x), static_cast<std::int32_t>(y), static_cast<std::int32_t>(z)});
                }
            }
        }
    }
    return out;
}

namespace detail {

double hausdorff_brute_force(const VoxelList& a, const VoxelList& b, const Spacing& spacing) {
    if (a.empty() || b.empty()) fail(ErrorCode::undefined_distance, "Hausdorff distance needs two nonempty masks");
    const double s[3] = {spacing[0], spacing[1], spacing[2]};
    return std::sqrt(std::max(directed_brute(a, b, s), directed_brute(b, a, s)));
}

double hausdorff_grid(const VoxelList& a, const VoxelList& b, const Spacing& spacing) {
    if (a.empty() || b.empty()) fail(ErrorCode::undefined_distance, "Hausdorff distance needs two nonempty masks");
    const double s[3] = {spacing[0], spacing[1], spacing[2]};
    constexpr std::int32_t kCell = 4;
    const PointGrid ga(a, kCell);
    const PointGrid gb(b, kCell);
    return std::sqrt(std::max(directed_grid(a, gb, s), directed_grid(b, ga, s)));
}

}  // namespace detail

double hausdorff_distance(const Volume3D& a, const Volume3D& b, const Spacing& spacing) {
    if (a.dims() != b.dims()) fail(ErrorCode::shape, "Hausdorff distance needs masks of identical dims");
    const VoxelList pa = foreground_voxels(a);
    const VoxelList pb = foreground_voxels(b);
    if (pa.empty() || pb.empty()) {
        fail(ErrorCode::undefined_distance, std::string("Hausdorff distance is undefined: ") +
                                                (pa.empty() ? "first" : "second") + " mask is empty");
    }
    if (pa.size() + pb.size() < kHausdorffBruteForceLimit) return detail::hausdorff_brute_force(pa, pb, spacing);
    return detail::hausdorff_grid(pa, pb, spacing);
}

double hausdorff_distance(const Volume3D& a, const Volume3D& b) { return hausdorff_distance(a, b, a.spacing()); }

std::string MetricsReport::record_header() {
    return "name\ttp\tfp\tfn\ttn\tdsc\tprecision\tsensitivity\tspecificity\thausdorff_mm";
}

std::string MetricsReport::to_record() const {
    return name + '\t' + std::to_string(counts.tp) + '\t' + std::to_string(counts.fp) + '\t' +
           std::to_string(counts.fn) + '\t' + std::to_string(counts.tn) + '\t' + fmt(metrics.dsc) + '\t' +
           fmt(metrics.precision) + '\t' + fmt(metrics.sensitivity) + '\t' + fmt(metrics.specificity) + '\t' +
           fmt(hausdorff_mm);
}

MetricsReport evaluate(const std::string& name, const Volume3D& pred, const Volume3D& truth) {
    MetricsReport r;
    r.name = name;
    r.counts = confusion(pred, truth);
    r.metrics = segmentation_metrics(r.counts);
    if (r.counts.tp + r.counts.fp > 0 && r.counts.tp + r.counts.fn > 0) {
        r.hausdorff_mm = hausdorff_distance(pred, truth, truth.spacing());
    }
    return r;
}

std::map<std::string, std::string> summarize(const std::vector<MetricsReport>& reports) {
    auto mean = [&](auto get) {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& r : reports) {
            if (auto v = get(r)) {
                s += *v;
                ++n;
            }
        }
        return n ? std::optional<double>(s / static_cast<double>(n)) : std::nullopt;
    };
    return {{"volumes", std::to_string(reports.size())},
            {"mean_dsc", fmt(mean([](const MetricsReport& r) { return r.metrics.dsc; }))},
            {"mean_precision", fmt(mean([](const MetricsReport& r) { return r.metrics.precision; }))},
            {"mean_sensitivity", fmt(mean([](const MetricsReport& r) { return r.metrics.sensitivity; }))},
            {"mean_specificity", fmt(mean([](const MetricsReport& r) { return r.metrics.specificity; }))},
            {"mean_hausdorff_mm", fmt(mean([](const MetricsReport& r) { return r.hausdorff_mm; }))}};
}

}  // namespace vk
