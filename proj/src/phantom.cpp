#include "vesselkit/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "vesselkit/enhance.hpp"
#include "vesselkit/error.hpp"
#include "vesselkit/nifti.hpp"
#include "vesselkit/parallel.hpp"

namespace vk {

namespace {

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (!(n > 0.0)) fail(ErrorCode::spec, "helix axis must be nonzero");
    return {a[0] / n, a[1] / n, a[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

/// Per-segment cached geometry of one curve.
struct Segment {
    Vec3 a, ab;
    double len2;
    double t0, dt;  // arc-length fraction at a, and its increment over the segment
    double r0, dr;  // curve radius profile: r(t) = r0 + dr * t
};

std::vector<Segment> segments_of(const Curve& c) {
    std::vector<Segment> out;
    double total = 0.0;
    for (std::size_t i = 1; i < c.points.size(); ++i) total += norm(sub(c.points[i], c.points[i - 1]));
    double run = 0.0;
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        const Vec3 ab = sub(c.points[i], c.points[i - 1]);
        const double len = norm(ab);
        const double t0 = total > 0.0 ? run / total : 0.0;
        const double dt = total > 0.0 ? len / total : 0.0;
        out.push_back({c.points[i - 1], ab, dot(ab, ab), t0, dt, c.radius_start, c.radius_end - c.radius_start});
        run += len;
    }
    return out;
}

double segment_margin(const Segment& s, const Vec3& p) {
    const Vec3 ap = sub(p, s.a);
    double u = s.len2 > 0.0 ? dot(ap, s.ab) / s.len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const Vec3 d{ap[0] - u * s.ab[0], ap[1] - u * s.ab[1], ap[2] - u * s.ab[2]};
    const double t = s.t0 + u * s.dt;
    return norm(d) - (s.r0 + s.dr * t);
}

std::string vec_str(const Vec3& p) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "(%.3f, %.3f, %.3f)", p[0], p[1], p[2]);
    return buf;
}

}  // namespace

Curve make_helix(const HelixParams& h, double radius_start, double radius_end) {
    if (h.segments_per_turn < 3) fail(ErrorCode::spec, "helix needs at least 3 segments per turn");
    if (!(h.turns > 0.0) || !(h.helix_radius > 0.0)) fail(ErrorCode::spec, "helix turns and radius must be positive");
    const Vec3 w = normalized(h.axis);
    const Vec3 helper = std::fabs(w[0]) < 0.9 ? Vec3{1.0, 0.0, 0.0} : Vec3{0.0, 1.0, 0.0};
    const Vec3 u = normalized(cross(w, helper));
    const Vec3 v = cross(w, u);
    const auto steps = static_cast<std::size_t>(std::ceil(h.turns * static_cast<double>(h.segments_per_turn)));
    Curve c;
    c.radius_start = radius_start;
    c.radius_end = radius_end;
    for (std::size_t i = 0; i <= steps; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(steps);
        const double ang = h.phase + 2.0 * std::numbers::pi * h.turns * frac;
        const double along = h.pitch * h.turns * frac;
        const double cu = h.helix_radius * std::cos(ang);
        const double cv = h.helix_radius * std::sin(ang);
        Vec3 p;
        for (int k = 0; k < 3; ++k) p[k] = h.centre[k] + cu * u[k] + cv * v[k] + along * w[k];
        c.points.push_back(p);
    }
    return c;
}

std::vector<Curve> make_bifurcation(const Vec3& from, const Vec3& junction, const Vec3& end_a, const Vec3& end_b,
                                    double trunk_radius, double junction_radius, double tip_radius) {
    return {Curve{{from, junction}, trunk_radius, junction_radius},
            Curve{{junction, end_a}, junction_radius, tip_radius},
            Curve{{junction, end_b}, junction_radius, tip_radius}};
}

void PhantomSpec::validate() const {
    if (dims.count() == 0) fail(ErrorCode::spec, "phantom dims must be positive");
    double min_extent = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < 3; ++a) min_extent = std::min(min_extent, static_cast<double>(dims[a]) * spacing[a]);
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
        const Curve& c = curves[ci];
        if (c.points.size() < 2) fail(ErrorCode::spec, "curve " + std::to_string(ci) + " needs at least two points");
        for (double r : {c.radius_start, c.radius_end}) {
            if (!(r > 0.0) || !(r < min_extent / 4.0)) {
                fail(ErrorCode::spec, "curve " + std::to_string(ci) + " radius " + std::to_string(r) +
                                          " mm must lie in (0, " + std::to_string(min_extent / 4.0) + ")");
            }
        }
        for (const Vec3& p : c.points) {
            for (std::size_t a = 0; a < 3; ++a) {
                const double hi = static_cast<double>(dims[a] - 1) * spacing[a];
                if (!(p[a] >= 0.0 && p[a] <= hi)) {
                    fail(ErrorCode::spec, "curve " + std::to_string(ci) + " point " + vec_str(p) +
                                              " lies outside the volume bounds");
                }
            }
        }
    }
    if (!(blur_mm >= 0.0) || !(noise_std >= 0.0)) fail(ErrorCode::spec, "blur and noise must be non-negative");
}

double tube_margin(const std::vector<Curve>& curves, const Vec3& p_mm) {
    double best = std::numeric_limits<double>::infinity();
    for (const Curve& c : curves) {
        for (const Segment& s : segments_of(c)) best = std::min(best, segment_margin(s, p_mm));
    }
    return best;
}

std::vector<double> margin_field(const PhantomSpec& spec, double band_mm) {
    spec.validate();
    const Dims& d = spec.dims;
    const Spacing& sp = spec.spacing;
    std::vector<double> field(d.count(), std::numeric_limits<double>::infinity());
    for (const Curve& c : spec.curves) {
        const double pad = c.max_radius() + band_mm;
        for (const Segment& s : segments_of(c)) {
            std::array<std::size_t, 3> lo{}, hi{};
            for (std::size_t a = 0; a < 3; ++a) {
                const double mn = std::min(s.a[a], s.a[a] + s.ab[a]) - pad;
                const double mx = std::max(s.a[a], s.a[a] + s.ab[a]) + pad;
                lo[a] = static_cast<std::size_t>(std::max(0.0, std::ceil(mn / sp[a])));
                hi[a] = static_cast<std::size_t>(std::clamp(std::floor(mx / sp[a]), -1.0, static_cast<double>(d[a] - 1)) + 1.0);
            }
            for (std::size_t z = lo[2]; z < hi[2]; ++z) {
                for (std::size_t y = lo[1]; y < hi[1]; ++y) {
                    for (std::size_t x = lo[0]; x < hi[0]; ++x) {
                        const Vec3 p{static_cast<double>(x) * sp[0], static_cast<double>(y) * sp[1],
                                     static_cast<double>(z) * sp[2]};
                        double& f = field[x + d.nx * (y + d.ny * z)];
                        f = std::min(f, segment_margin(s, p));
                    }
                }
            }
        }
    }
    for (double& f : field) {
        if (f > band_mm) f = std::numeric_limits<double>::infinity();
    }
    return field;
}

Phantom generate_phantom(const PhantomSpec& spec) {
    const auto field = margin_field(spec, 0.0);
    std::vector<float> truth(field.size());
    std::vector<float> image(field.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        const bool in = field[i] <= 0.0;
        truth[i] = in ? 1.0F : 0.0F;
        image[i] = in ? spec.foreground : spec.background;
    }
    Volume3D base(spec.dims, spec.spacing, std::move(image));
    Volume3D blurred = gaussian_smooth(base, spec.blur_mm);
    std::vector<float> out(blurred.data().begin(), blurred.data().end());
    if (spec.noise_std > 0.0) {
        std::mt19937_64 rng(spec.seed);
        std::normal_distribution<double> noise(0.0, spec.noise_std);
        for (float& v : out) v = static_cast<float>(v + noise(rng));
    }
    return {Volume3D(spec.dims, spec.spacing, std::move(out)),
            Volume3D(spec.dims, spec.spacing, std::move(truth), VolumeKind::binary_mask)};
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

PhantomSpec random_phantom_spec(const PhantomRanges& r, std::uint64_t seed) {
    if (r.min_curves < 1 || r.max_curves < r.min_curves) fail(ErrorCode::spec, "curve count range is empty");
    if (!(r.min_radius > 0.0) || r.max_radius < r.min_radius) fail(ErrorCode::spec, "radius range is empty");
    std::mt19937_64 rng(seed);
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    const double margin = r.max_radius + 2.0;
    Vec3 extent{};
    for (std::size_t a = 0; a < 3; ++a) {
        extent[a] = static_cast<double>(r.dims[a] - 1) * r.spacing[a];
        if (extent[a] <= 2.0 * margin) fail(ErrorCode::spec, "volume too small for the radius range");
    }
    auto inner_point = [&] {
        return Vec3{uni(margin, extent[0] - margin), uni(margin, extent[1] - margin), uni(margin, extent[2] - margin)};
    };
    auto radius = [&] { return uni(r.min_radius, r.max_radius); };

    PhantomSpec spec;
    spec.dims = r.dims;
    spec.spacing = r.spacing;
    spec.background = r.background;
    spec.foreground = r.foreground;
    spec.blur_mm = r.blur_mm;
    spec.noise_std = uni(r.min_noise, r.max_noise);
    spec.seed = derive_seed(seed, 0xA5A5);

    const auto n_curves = std::uniform_int_distribution<std::size_t>(r.min_curves, r.max_curves)(rng);
    std::vector<std::vector<Curve>> groups;
    for (std::size_t k = 0; k < n_curves; ++k) {
        const int kind = std::uniform_int_distribution<int>(0, 2)(rng);
        if (kind == 0) {
            Curve c;
            const int verts = std::uniform_int_distribution<int>(2, 3)(rng);
            for (int v = 0; v < verts; ++v) c.points.push_back(inner_point());
            c.radius_start = radius();
            c.radius_end = radius();
            groups.push_back({c});
        } else if (kind == 1) {
            const auto axis = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, 2)(rng));
            HelixParams h;
            h.axis = {0.0, 0.0, 0.0};
            h.axis[axis] = 1.0;
            const double min_perp = std::min(extent[(axis + 1) % 3], extent[(axis + 2) % 3]);
            h.helix_radius = uni(4.0, std::max(4.0, std::min(8.0, min_perp / 2.0 - margin - 0.5)));
            h.pitch = uni(10.0, 18.0);
            const double room = extent[axis] - 2.0 * margin;
            h.turns = std::min(uni(1.0, 2.0), room / h.pitch);
            h.phase = uni(0.0, 2.0 * std::numbers::pi);
            // Place the helix centre so the whole coil stays inside the inner box.
            Vec3 centre{};
            for (std::size_t a = 0; a < 3; ++a) {
                if (a == axis) {
                    centre[a] = uni(margin, extent[a] - margin - h.pitch * h.turns);
                } else {
                    centre[a] = uni(margin + h.helix_radius, extent[a] - margin - h.helix_radius);
                }
            }
            h.centre = centre;
            Curve c = make_helix(h, radius(), radius());
            groups.push_back({c});
        } else {
            const double trunk = radius();
            const double mid = std::max(r.min_radius, 0.75 * trunk);
            const double tip = std::max(r.min_radius, 0.75 * mid);
            groups.push_back(make_bifurcation(inner_point(), inner_point(), inner_point(), inner_point(), trunk, mid, tip));
        }
    }

    auto flatten = [&] {
        std::vector<Curve> out;
        for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
        return out;
    };
    auto fraction = [&] {
        PhantomSpec s = spec;
        s.curves = flatten();
        const auto f = margin_field(s, 0.0);
        const auto n = std::count_if(f.begin(), f.end(), [](double v) { return v <= 0.0; });
        return static_cast<double>(n) / static_cast<double>(f.size());
    };
    while (groups.size() > 1 && fraction() >= r.max_foreground_fraction) groups.pop_back();
    for (int shrink = 0; fraction() >= r.max_foreground_fraction; ++shrink) {
        if (shrink == 20) fail(ErrorCode::spec, "cannot meet the foreground budget with the given radius range");
        for (Curve& c : groups.front()) {
            c.radius_start = std::max(0.5 * r.min_radius, 0.8 * c.radius_start);
            c.radius_end = std::max(0.5 * r.min_radius, 0.8 * c.radius_end);
        }
    }
    spec.curves = flatten();
    return spec;
}

std::string_view to_string(Split s) noexcept {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

std::array<std::size_t, 3> split_counts(std::size_t n) {
    const std::size_t val = n / 10;
    const std::size_t test = n / 10;
    return {n - val - test, val, test};
}

std::vector<DatasetEntry> generate_dataset(const std::filesystem::path& dir, std::size_t n,
                                           const PhantomRanges& ranges, std::uint64_t seed) {
    if (n == 0) fail(ErrorCode::spec, "dataset needs at least one volume");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "cannot create '" + dir.string() + "': " + ec.message());
    const auto counts = split_counts(n);
    std::vector<DatasetEntry> entries(n);
    parallel_for(n, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            const Phantom ph = generate_phantom(random_phantom_spec(ranges, derive_seed(seed, i)));
            char stem[32];
            std::snprintf(stem, sizeof stem, "phantom_%03zu", i);
            entries[i].image = std::string(stem) + "_image.nii.gz";
            entries[i].label = std::string(stem) + "_label.nii.gz";
            entries[i].split = i < counts[0] ? Split::train : (i < counts[0] + counts[1] ? Split::val : Split::test);
            write_nifti(ph.image, dir / entries[i].image);
            write_nifti(ph.truth, dir / entries[i].label);
        }
    });
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) fail(ErrorCode::io, "cannot write manifest in '" + dir.string() + "'");
    for (const auto& en : entries) {
        manifest << en.image.string() << ' ' << en.label.string() << ' ' << to_string(en.split) << '\n';
    }
    if (!manifest) fail(ErrorCode::io, "short write to manifest in '" + dir.string() + "'");
    for (auto& en : entries) {
        en.image = dir / en.image;
        en.label = dir / en.label;
    }
    return entries;
}

std::vector<DatasetEntry> load_manifest(const std::filesystem::path& manifest_or_dir) {
    const auto path =
        std::filesystem::is_directory(manifest_or_dir) ? manifest_or_dir / "manifest.txt" : manifest_or_dir;
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot read manifest '" + path.string() + "'");
    const auto base = path.parent_path();
    std::vector<DatasetEntry> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string image, label, split;
        if (!(ss >> image >> label >> split)) {
            fail(ErrorCode::format, "manifest line " + std::to_string(line_no) + " needs 'image label split'");
        }
        DatasetEntry e;
        e.image = std::filesystem::path(image).is_absolute() ? std::filesystem::path(image) : base / image;
        e.label = std::filesystem::path(label).is_absolute() ? std::filesystem::path(label) : base / label;
        if (split == "train") {
            e.split = Split::train;
        } else if (split == "val") {
            e.split = Split::val;
        } else if (split == "test") {
            e.split = Split::test;
        } else {
            fail(ErrorCode::format, "manifest line " + std::to_string(line_no) + " has unknown split '" + split + "'");
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::uint64_t checksum(const Volume3D& v) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (float f : v.data()) {
        unsigned char b[4];
        std::memcpy(b, &f, 4);
        for (unsigned char c : b) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace vk
