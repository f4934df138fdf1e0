#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "qrvae/data.hpp"

using namespace qrvae;

TEST_CASE("moon arcs and counts") {
    const auto a = moon_arc_point(0, 0.0), b = moon_arc_point(1, 0.0);
    CHECK(a.z1 == 1.0);
    CHECK(a.z2 == 0.0);
    CHECK(b.z1 == 0.0);
    CHECK(b.z2 == 0.5);

    auto pts = generate_two_moons(500, 7);
    CHECK(pts.size() == 500);
    auto again = generate_two_moons(500, 7);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(pts[i].z1 == again[i].z1);
        CHECK(pts[i].z2 == again[i].z2);
    }
    // Without jitter every point lies on its arc; the first half on the upper one.
    auto exact = generate_two_moons(500, 3, 0.0);
    std::size_t upper = 0;
    for (const auto& p : exact) {
        const bool on_upper = std::abs(p.z1 * p.z1 + p.z2 * p.z2 - 1.0) < 1e-12 && p.z2 >= 0;
        const bool on_lower = std::abs((1 - p.z1) * (1 - p.z1) + (0.5 - p.z2) * (0.5 - p.z2) - 1.0) < 1e-12;
        CHECK((on_upper || on_lower));
        upper += on_upper;
    }
    CHECK(upper == 250);
    CHECK_THROWS(generate_two_moons(0, 1));
}

TEST_CASE("moons-to-4d worked examples") {
    const std::array<double, 4> zero{};
    auto v = moons_to_4d({1, 0}, zero);
    CHECK(v == std::array<double, 4>{1, 1, -1, 1});
    CHECK(moons_to_4d({0, 0}, zero) == std::array<double, 4>{0, 0, 0, 0});
    CHECK(moons_to_4d({1, 1}, zero) == std::array<double, 4>{0, 0.5, 0, 2});
    CHECK_THROWS_AS(moons_noise_std({-3.7, 0}), NumericError);
}

TEST_CASE("moons-to-4d without noise is the polynomial map") {
    oracle::Gen g(4);
    for (int i = 0; i < 200; ++i) {
        const double z1 = g.uniform(-2, 3), z2 = g.uniform(-2, 2);
        const auto v = moons_to_4d({z1, z2}, {});
        CHECK(v[0] == z1 - z2);
        CHECK(v[1] == z1 * z1 - 0.5 * z2);
        CHECK(v[2] == z1 * z2 - z1);
        CHECK(v[3] == z1 + z2);
    }
}

TEST_CASE("stored noise draws reproduce each observation") {
    for (const auto& s : generate_moon_samples(100, 5, 0.7))
        CHECK(moons_to_4d(s.latent, s.eps, 0.7) == s.observed);
}

TEST_CASE("monte carlo noise std of v1 matches the radical") {
    oracle::Gen g(99);
    const MoonPoint z{0.4, -0.2};
    const int n = 100000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const double v = moons_to_4d(z, {g.normal(), 0, 0, 0})[0];
        s += v;
        s2 += v * v;
    }
    const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
    CHECK(std::abs(sd / std::sqrt(0.03 + 0.05 * (3 + 0.4)) - 1.0) < 0.05);
}

TEST_CASE("idx hand-built bytes") {
    // 1 x 2 x 2 unsigned-byte image file, written out byte by byte.
    const std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64};
    ImageDataset ds = parse_idx_images(bytes);
    CHECK(ds.count == 1);
    CHECK(ds.height == 2);
    CHECK(ds.width == 2);
    CHECK(ds.pixels[0] == 0.0);
    CHECK(ds.pixels[1] == 1.0);
    CHECK(ds.pixels[2] == doctest::Approx(0.50196).epsilon(1e-5));
    CHECK(ds.pixels[3] == doctest::Approx(0.25098).epsilon(1e-5));
}

TEST_CASE("idx with zero images is an empty dataset") {
    const std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28};
    ImageDataset ds = parse_idx_images(bytes);
    CHECK(ds.count == 0);
    CHECK(ds.pixels.empty());
}

TEST_CASE("idx errors") {
    std::vector<std::uint8_t> good{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4};
    auto bad_magic = good;
    bad_magic[2] = 9;
    CHECK_THROWS_AS(parse_idx_bytes(bad_magic), InputError);
    std::vector<std::uint8_t> truncated(good.begin(), good.end() - 1);
    try {
        parse_idx_bytes(truncated);
        FAIL("expected a parse error");
    } catch (const InputError& e) {
        const std::string what = e.what();
        CHECK(what.find("expected 4") != std::string::npos);
        CHECK(what.find("got 3") != std::string::npos);
    }
    std::vector<std::uint8_t> header_only(good.begin(), good.begin() + 10);
    CHECK_THROWS_AS(parse_idx_bytes(header_only), InputError);
    std::vector<std::uint8_t> huge{0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255};
    CHECK_THROWS_AS(parse_idx_bytes(huge), InputError);
    auto labels = std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 2, 7, 9};
    CHECK(parse_idx_bytes(labels).values == std::vector<std::uint8_t>{7, 9});
    CHECK_THROWS_AS(parse_idx_images(labels), InputError);
}

TEST_CASE("idx write then parse is the identity") {
    oracle::Gen g(3);
    for (int inst = 0; inst < 10; ++inst) {
        IdxArray a;
        a.dims = {std::uint32_t(g.index(1, 4)), std::uint32_t(g.index(1, 5)), std::uint32_t(g.index(1, 5))};
        a.values.resize(std::size_t(a.dims[0]) * a.dims[1] * a.dims[2]);
        for (auto& v : a.values) v = std::uint8_t(g.index(0, 255));
        IdxArray b = parse_idx_bytes(serialize_idx(a));
        CHECK(b.dims == a.dims);
        CHECK(b.values == a.values);
    }
    const auto path = std::filesystem::temp_directory_path() / "qrvae_idx_roundtrip.idx";
    ImageDataset ds = synthesize_lesion_set(3, 1, 1.0);
    write_idx(path, images_to_idx(ds));
    ImageDataset back = load_idx_images(path);
    CHECK(back.channels == 3);
    for (std::size_t i = 0; i < ds.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - ds.pixels[i]) <= 0.5 / 255 + 1e-12);
    std::filesystem::remove(path);
}

TEST_CASE("lesion set") {
    ImageDataset clean = synthesize_lesion_set(8, 2, 0.0);
    CHECK(clean.channels == 3);
    CHECK(clean.height == 64);
    for (auto m : clean.masks) CHECK(m == 0);
    for (double p : clean.pixels) CHECK((p >= 0.0 && p <= 1.0));

    ImageDataset sick = synthesize_lesion_set(10, 2, 1.0);
    for (std::size_t i = 0; i < 10; ++i) {
        std::size_t count = 0;
        for (auto m : sick.mask(i)) count += m;
        CHECK(count >= 28);
    }
    ImageDataset again = synthesize_lesion_set(10, 2, 1.0);
    CHECK(again.pixels == sick.pixels);
    CHECK(again.masks == sick.masks);

    ImageDataset half = synthesize_lesion_set(10, 2, 0.5);
    std::size_t with = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        bool any = false;
        for (auto m : half.mask(i)) any |= m != 0;
        with += any;
    }
    CHECK(with == 5);
}

TEST_CASE("lesion masks coincide with the injected ellipses") {
    LesionConfig c;
    c.noise_std = 0.0;
    ImageDataset a = synthesize_lesion_set(6, 4, 0.0, c), b = synthesize_lesion_set(6, 4, 1.0, c);
    const std::size_t m = 64 * 64;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < m; ++k) {
            const bool changed = b.pixels[i * 3 * m + k] != a.pixels[i * 3 * m + k];
            CHECK(changed == (b.masks[i * m + k] == 1));
        }
}

TEST_CASE("split") {
    auto all = split(7, {1, 0, 0}, 1);
    CHECK(all.train.size() == 7);
    CHECK(all.val.empty());
    auto s = split(10, {0.8, 0.1, 0.1}, 3);
    CHECK(s.train.size() == 8);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 1);
    std::set<std::size_t> seen(s.train.begin(), s.train.end());
    seen.insert(s.val.begin(), s.val.end());
    seen.insert(s.test.begin(), s.test.end());
    CHECK(seen.size() == 10);
    auto t = split(10, {0.8, 0.1, 0.1}, 3);
    CHECK(t.train == s.train);
    CHECK(t.test == s.test);
    CHECK_THROWS(split(10, {0.5, 0.1, 0.1}, 3));
}
