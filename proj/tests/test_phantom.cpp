#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <set>

#include "test_util.hpp"
#include "vesselkit/nifti.hpp"
#include "vesselkit/phantom.hpp"

using namespace vk;
using vk::test::code_of;

namespace {

// Point-to-segment distance written independently of the library.
double seg_distance(const Vec3& p, const Vec3& a, const Vec3& b, double& t_out) {
    double ab[3], ap[3], len2 = 0.0, proj = 0.0;
    for (int k = 0; k < 3; ++k) {
        ab[k] = b[k] - a[k];
        ap[k] = p[k] - a[k];
        len2 += ab[k] * ab[k];
        proj += ab[k] * ap[k];
    }
    const double t = len2 > 0.0 ? std::clamp(proj / len2, 0.0, 1.0) : 0.0;
    t_out = t;
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) d2 += (ap[k] - t * ab[k]) * (ap[k] - t * ab[k]);
    return std::sqrt(d2);
}

double brute_margin(const std::vector<Curve>& curves, const Vec3& p) {
    double best = std::numeric_limits<double>::infinity();
    for (const Curve& c : curves) {
        double total = 0.0;
        std::vector<double> lens;
        for (std::size_t i = 1; i < c.points.size(); ++i) {
            double l2 = 0.0;
            for (int k = 0; k < 3; ++k) l2 += (c.points[i][k] - c.points[i - 1][k]) * (c.points[i][k] - c.points[i - 1][k]);
            lens.push_back(std::sqrt(l2));
            total += lens.back();
        }
        double run = 0.0;
        for (std::size_t i = 1; i < c.points.size(); ++i) {
            double t = 0.0;
            const double d = seg_distance(p, c.points[i - 1], c.points[i], t);
            const double s = (run + t * lens[i - 1]) / total;
            const double r = c.radius_start + (c.radius_end - c.radius_start) * s;
            best = std::min(best, d - r);
            run += lens[i - 1];
        }
    }
    return best;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

PhantomSpec clean_spec() {
    PhantomSpec s;
    s.dims = {32, 28, 24};
    s.curves = {Curve{{{3.0, 4.0, 5.0}, {20.0, 14.0, 12.0}, {28.0, 20.0, 18.0}}, 2.5, 1.2}};
    s.blur_mm = 0.0;
    s.noise_std = 0.0;
    return s;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("spec validation") {
    PhantomSpec s = clean_spec();
    CHECK_NOTHROW(s.validate());
    s.curves[0].points[1] = {40.0, 4.0, 4.0};
    CHECK(code_of([&] { generate_phantom(s); }) == ErrorCode::spec);
    s = clean_spec();
    s.curves[0].radius_end = 0.0;
    CHECK(code_of([&] { s.validate(); }) == ErrorCode::spec);
    s = clean_spec();
    s.curves[0].radius_start = 6.0;  // min extent 24 mm -> radius must stay below 6
    CHECK(code_of([&] { s.validate(); }) == ErrorCode::spec);
    s = clean_spec();
    s.curves[0].points.resize(1);
    CHECK(code_of([&] { s.validate(); }) == ErrorCode::spec);
    s = clean_spec();
    s.noise_std = -1.0;
    CHECK(code_of([&] { s.validate(); }) == ErrorCode::spec);
}

TEST_CASE("axis-aligned cylinder volume") {
    // Radius 2 mm along x through full 64 mm at 1 mm spacing. The end caps fall
    // outside the volume so the truth is a clipped cylinder.
    PhantomSpec s;
    s.dims = {64, 64, 64};
    s.blur_mm = 0.0;
    s.noise_std = 0.0;
    const double r = 2.0;
    s.curves = {Curve{{{0.0, 32.0, 32.0}, {63.0, 32.0, 32.0}}, r, r}};
    const auto n = count_foreground(generate_phantom(s).truth);
    // a radius-2 disk centred on a voxel covers 13 lattice points
    CHECK(n == 13 * 64);
    const double analytic = std::numbers::pi * r * r * 64.0;
    MESSAGE("axis-aligned lattice count " << n << " vs analytic " << analytic << " ("
                                          << 100.0 * (static_cast<double>(n) / analytic - 1.0) << "%)");

    // A slightly oblique axis samples every sub-voxel offset, so the count
    // approaches the continuous volume: cross-section area pi r^2 / cos(theta) per x slice.
    s.curves = {Curve{{{0.0, 20.3, 26.1}, {63.0, 43.7, 37.9}}, r, r}};
    const auto m = count_foreground(generate_phantom(s).truth);
    const double dx = 63.0, dy = 23.4, dz = 11.8;
    const double cos_t = dx / std::sqrt(dx * dx + dy * dy + dz * dz);
    const double oblique = std::numbers::pi * r * r * 64.0 / cos_t;
    CHECK(std::abs(static_cast<double>(m) / oblique - 1.0) < 0.03);
}

TEST_CASE("noise-free phantom is the two-level indicator") {
    const PhantomSpec s = clean_spec();
    const Phantom ph = generate_phantom(s);
    CHECK(ph.truth.kind() == VolumeKind::binary_mask);
    CHECK(count_foreground(ph.truth) > 0);
    for (std::size_t i = 0; i < ph.image.size(); ++i) {
        const float expect = s.foreground * ph.truth[i] + s.background * (1.0F - ph.truth[i]);
        CHECK(ph.image[i] == expect);
    }
}

TEST_CASE("seeded generation is reproducible") {
    PhantomSpec s = clean_spec();
    s.blur_mm = 0.5;
    s.noise_std = 0.1;
    s.seed = 42;
    const Phantom a = generate_phantom(s);
    const Phantom b = generate_phantom(s);
    CHECK(checksum(a.image) == checksum(b.image));
    CHECK(checksum(a.truth) == checksum(b.truth));
    s.seed = 43;
    const Phantom c = generate_phantom(s);
    CHECK(checksum(a.image) != checksum(c.image));
    CHECK(checksum(a.truth) == checksum(c.truth));
}

TEST_CASE("truth matches brute-force distance on sampled voxels") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        PhantomRanges ranges;
        ranges.dims = {40, 40, 40};
        const PhantomSpec s = random_phantom_spec(ranges, derive_seed(11, seed));
        REQUIRE(!s.curves.empty());
        const auto field = margin_field(s, 1e9);
        const Phantom ph = generate_phantom(s);
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, field.size() - 1);
        for (int k = 0; k < 300; ++k) {
            const std::size_t i = pick(rng);
            const std::size_t x = i % 40, y = (i / 40) % 40, z = i / 1600;
            const Vec3 p{double(x), double(y), double(z)};
            const double ref = brute_margin(s.curves, p);
            CHECK(std::abs(field[i] - ref) <= 1e-9);
            CHECK(std::abs(tube_margin(s.curves, p) - ref) <= 1e-9);
            CHECK((ph.truth[i] > 0.5F) == (ref <= 0.0));
        }
    }
}

TEST_CASE("helix and bifurcation builders") {
    HelixParams h;
    h.centre = {20.0, 20.0, 5.0};
    h.helix_radius = 6.0;
    h.pitch = 10.0;
    h.turns = 1.5;
    const Curve c = make_helix(h, 2.0, 1.0);
    REQUIRE(c.points.size() == 49);
    for (const Vec3& p : c.points) {
        CHECK(std::hypot(p[0] - 20.0, p[1] - 20.0) == doctest::Approx(6.0));
    }
    CHECK(c.points.back()[2] - c.points.front()[2] == doctest::Approx(15.0));
    h.axis = {0.0, 0.0, 0.0};
    CHECK(code_of([&] { make_helix(h, 1, 1); }) == ErrorCode::spec);

    const auto b = make_bifurcation({2, 2, 2}, {10, 10, 10}, {18, 10, 4}, {18, 14, 16}, 3.0, 2.0, 1.0);
    REQUIRE(b.size() == 3);
    CHECK(b[0].points.back() == b[1].points.front());
    CHECK(b[0].points.back() == b[2].points.front());
    CHECK(b[0].radius_end == b[1].radius_start);
}

TEST_CASE("split arithmetic") {
    CHECK(split_counts(20) == std::array<std::size_t, 3>{16, 2, 2});
    CHECK(split_counts(10) == std::array<std::size_t, 3>{8, 1, 1});
    CHECK(split_counts(1) == std::array<std::size_t, 3>{1, 0, 0});
    for (std::size_t n = 1; n < 200; ++n) {
        const auto c = split_counts(n);
        CHECK(c[0] + c[1] + c[2] == n);
    }
}

TEST_CASE("dataset generation") {
    vk::test::TempDir a("ds-a");
    vk::test::TempDir b("ds-b");
    const PhantomRanges ranges;
    const auto entries = generate_dataset(a.path(), 20, ranges, 7);
    REQUIRE(entries.size() == 20);
    std::array<std::size_t, 3> per{};
    std::set<std::uint64_t> hashes;
    for (const auto& e : entries) {
        ++per[static_cast<std::size_t>(e.split)];
        const Volume3D img = read_nifti(e.image);
        const Volume3D lab = read_nifti(e.label);
        CHECK(img.dims() == ranges.dims);
        CHECK(lab.kind() == VolumeKind::binary_mask);
        const double frac = static_cast<double>(count_foreground(lab)) / static_cast<double>(lab.size());
        CHECK(frac > 0.0);
        CHECK(frac < 0.05);
        hashes.insert(checksum(img));
    }
    CHECK(per == std::array<std::size_t, 3>{16, 2, 2});
    CHECK(hashes.size() == 20);

    const auto loaded = load_manifest(a.path());
    REQUIRE(loaded.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(loaded[i].image == entries[i].image);
        CHECK(loaded[i].split == entries[i].split);
    }

    // byte-for-byte reproducible from (ranges, seed)
    const auto again = generate_dataset(b.path(), 20, ranges, 7);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(file_bytes(entries[i].image) == file_bytes(again[i].image));
        CHECK(file_bytes(entries[i].label) == file_bytes(again[i].label));
    }
    CHECK(file_bytes(a / "manifest.txt") == file_bytes(b / "manifest.txt"));
    CHECK(code_of([&] { generate_dataset(a.path(), 0, ranges, 7); }) == ErrorCode::spec);
}

TEST_CASE("manifest errors") {
    vk::test::TempDir d("manifest");
    CHECK(code_of([&] { load_manifest(d / "missing.txt"); }) == ErrorCode::io);
    {
        std::ofstream out(d / "manifest.txt");
        out << "a.nii b.nii train\nonly_two fields\n";
    }
    CHECK(code_of([&] { load_manifest(d.path()); }) == ErrorCode::format);
    {
        std::ofstream out(d / "manifest.txt");
        out << "# header\na.nii b.nii holdout\n";
    }
    CHECK(code_of([&] { load_manifest(d.path()); }) == ErrorCode::format);
}

TEST_CASE("seed derivation spreads nearby inputs") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t base = 0; base < 20; ++base)
        for (std::uint64_t i = 0; i < 50; ++i) seen.insert(derive_seed(base, i));
    CHECK(seen.size() == 1000);
    CHECK(derive_seed(3, 4) == derive_seed(3, 4));
}

}  // TEST_SUITE
