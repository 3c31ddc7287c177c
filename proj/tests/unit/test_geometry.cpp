#include <cmath>
#include <vector>

#include "doctest.h"
#include "image2pci/geometry.hpp"
#include "support.hpp"

using namespace i2p;

namespace {

// Oracle: the banding rule applied by hand, edges to the lower band.
Severity band_oracle(double mm, double low, double high) {
    if (mm <= low) return Severity::Low;
    if (mm <= high) return Severity::Medium;
    return Severity::High;
}

WidthMeasurement measure(std::array<double, 3> px, double px_per_mm) {
    return measure_width(px, PixelScale(px_per_mm), DistressType::Longitudinal, SeverityThresholds::defaults());
}

} // namespace

TEST_CASE("pixel_threshold follows the scale") {
    CHECK(pixel_threshold(PixelScale::from_extent(2048, 4096), 10.0) == 5.0);
    CHECK(pixel_threshold(PixelScale::from_extent(1000, 2500), 76.0) == doctest::Approx(30.4).epsilon(1e-12));
    CHECK(pixel_threshold(PixelScale(3.7), 0.0) == 0.0);
    CHECK_THROWS_AS(pixel_threshold(PixelScale(1.0), -1.0), GeometryError);
    CHECK_THROWS_AS(pixel_threshold(PixelScale(1.0), NAN), GeometryError);
    CHECK_THROWS_AS(PixelScale(0.0), GeometryError);
    CHECK_THROWS_AS(PixelScale::from_extent(100, -5), GeometryError);
}

TEST_CASE("pixel_threshold is additive for dyadic inputs") {
    i2p::Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        // Powers of two and small dyadic thresholds keep every product exact.
        const PixelScale s(std::ldexp(1.0, static_cast<int>(rng.uniform_int(-4, 4))));
        const double a = static_cast<double>(rng.uniform_int(0, 4096)) / 64.0;
        const double b = static_cast<double>(rng.uniform_int(0, 4096)) / 64.0;
        CHECK(pixel_threshold(s, a + b) == pixel_threshold(s, a) + pixel_threshold(s, b));
    }
}

TEST_CASE("width_between") {
    CHECK(width_between({10, 10}, {13, 14}) == 5.0);
    CHECK(width_between({0, 0}, {0, 7}) == 7.0);
    CHECK(width_between({2, 3}, {5, 11}) == doctest::Approx(std::sqrt(73.0)).epsilon(1e-15));
    CHECK_THROWS_AS(width_between({1, 1}, {1, 1}), GeometryError);

    i2p::Rng rng(5);
    for (int i = 0; i < 300; ++i) {
        Point p{rng.uniform(-50, 50), rng.uniform(-50, 50)};
        Point q{rng.uniform(-50, 50), rng.uniform(-50, 50)};
        Point r{rng.uniform(-50, 50), rng.uniform(-50, 50)};
        CHECK(width_between(p, q) == width_between(q, p));
        CHECK(width_between(p, r) <= width_between(p, q) + width_between(q, r) + 1e-12);
    }
}

TEST_CASE("measure_width banding examples") {
    auto a = measure({4, 5, 6}, 0.5);
    CHECK(a.mean_px == 5.0);
    CHECK(a.mean_mm == 10.0);
    CHECK(a.severity == Severity::Low);
    CHECK(measure({40, 40, 40}, 0.5).severity == Severity::High);
    auto c = measure({10, 10, 10}, 1.0);
    CHECK(c.mean_mm == 10.0);
    CHECK(c.severity == Severity::Low);
    CHECK(measure({38, 38, 38}, 0.5).severity == Severity::Medium);  // 76 mm edge
    CHECK_THROWS_AS(measure_width(std::array<double, 3>{1, 2, 3}, PixelScale(1), DistressType::Patch,
                                  SeverityThresholds::defaults()),
                    GeometryError);
}

TEST_CASE("measure_width from point pairs uses the dominant axis") {
    const ImageScale scale{PixelScale(0.5), PixelScale(2.0)};
    std::array<PointPair, 3> horizontal{PointPair{{10, 10}, {14, 10}}, PointPair{{10, 20}, {16, 21}},
                                        PointPair{{3, 3}, {8, 3}}};
    auto m = measure_width(std::span<const PointPair, 3>(horizontal), scale, DistressType::Transverse,
                           SeverityThresholds::defaults());
    const double mean_px = (4.0 + std::sqrt(37.0) + 5.0) / 3.0;
    CHECK(m.mean_px == doctest::Approx(mean_px).epsilon(1e-14));
    CHECK(m.mean_mm == doctest::Approx(mean_px / 0.5).epsilon(1e-14));

    std::array<PointPair, 3> vertical{PointPair{{0, 0}, {0, 30}}, PointPair{{1, 0}, {1, 30}},
                                      PointPair{{2, 0}, {2, 30}}};
    auto v = measure_width(std::span<const PointPair, 3>(vertical), scale, DistressType::Transverse,
                           SeverityThresholds::defaults());
    CHECK(v.mean_mm == 15.0);
    CHECK(v.severity == Severity::Medium);
}

TEST_CASE("severity banding matches the oracle on random widths and both edges") {
    const auto thresholds = SeverityThresholds::defaults();
    const WidthBand band = *thresholds.band(DistressType::Longitudinal);
    i2p::Rng rng(2024);
    std::vector<double> widths_mm{band.low_max_mm, band.high_min_mm};
    // Multiples of 1/64 keep the three-sample mean exact.
    while (widths_mm.size() < 200) widths_mm.push_back(static_cast<double>(rng.uniform_int(0, 120 * 64)) / 64.0);
    for (double mm : widths_mm) {
        const auto m = measure({mm, mm, mm}, 1.0);
        CHECK(m.mean_mm == mm);
        CHECK(m.severity == band_oracle(mm, band.low_max_mm, band.high_min_mm));
    }
}

TEST_CASE("severity is monotone in the samples") {
    i2p::Rng rng(99);
    for (int i = 0; i < 300; ++i) {
        std::array<double, 3> s{rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(0, 60)};
        std::array<double, 3> t = s;
        for (double& x : t) x += rng.uniform(0, 20);
        CHECK(measure(s, 0.7).severity <= measure(t, 0.7).severity);
    }
}

TEST_CASE("thresholds file round trip and validation") {
    const auto loaded = SeverityThresholds::load(test::source_dir() / "data" / "thresholds_default.json");
    CHECK(loaded.band(DistressType::Transverse)->low_max_mm == 10.0);
    CHECK(loaded.band(DistressType::Transverse)->high_min_mm == 76.0);
    CHECK(loaded.band(DistressType::Alligator) == nullptr);
    CHECK_FALSE(loaded.provenance().empty());
    const auto again = SeverityThresholds::from_json(loaded.to_json());
    CHECK(again.to_json() == loaded.to_json());
    CHECK_THROWS_AS(SeverityThresholds::from_json(R"({"longitudinal": {"low_max_mm": 80, "high_min_mm": 10}})"),
                    ConfigError);
    CHECK_THROWS_AS(SeverityThresholds::from_json(R"({"pothole": {"low_max_mm": 1, "high_min_mm": 10}})"),
                    ConfigError);
    CHECK_THROWS_AS(SeverityThresholds::from_json("{"), ConfigError);
}

TEST_CASE("polygon_area") {
    std::vector<Point> square{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    CHECK(polygon_area(square) == 1.0);
    std::vector<Point> tri{{0, 0}, {4, 0}, {0, 3}};
    CHECK(polygon_area(tri) == 6.0);
    std::vector<Point> two{{0, 0}, {1, 1}};
    CHECK_THROWS_AS(polygon_area(two), GeometryError);
}

namespace {

std::vector<Point> random_star(i2p::Rng& rng, double cx, double cy, double r) {
    const int k = static_cast<int>(rng.uniform_int(3, 12));
    std::vector<Point> v;
    for (int i = 0; i < k; ++i) {
        const double a = 2.0 * M_PI * (i + rng.uniform(0.1, 0.9)) / k;
        const double rad = r * rng.uniform(0.3, 1.0);
        v.push_back({cx + rad * std::cos(a), cy + rad * std::sin(a)});
    }
    return v;
}

bool inside(const std::vector<Point>& v, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        if ((v[i].y > y) != (v[j].y > y) && x < (v[j].x - v[i].x) * (y - v[i].y) / (v[j].y - v[i].y) + v[i].x) in = !in;
    }
    return in;
}

// Slivers thinner than a few pixels are dominated by edge effects.
double min_altitude(const std::vector<Point>& tri) {
    double longest = 0.0;
    for (int i = 0; i < 3; ++i) longest = std::max(longest, width_between(tri[i], tri[(i + 1) % 3]));
    return 2.0 * polygon_area(tri) / longest;
}

} // namespace

TEST_CASE("polygon_area invariances") {
    i2p::Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        auto v = random_star(rng, 0, 0, 20);
        REQUIRE(is_simple(v));
        const double a = polygon_area(v);
        auto rot = v;
        std::rotate(rot.begin(), rot.begin() + 1, rot.end());
        CHECK(polygon_area(rot) == doctest::Approx(a).epsilon(1e-12));
        auto rev = v;
        std::reverse(rev.begin(), rev.end());
        CHECK(polygon_area(rev) == doctest::Approx(a).epsilon(1e-12));
        auto moved = v;
        for (auto& p : moved) p = {p.x + 13.5, p.y - 7.25};
        CHECK(polygon_area(moved) == doctest::Approx(a).epsilon(1e-9));
    }
}

TEST_CASE("polygon_area agrees with a Monte-Carlo estimate") {
    i2p::Rng rng(31);
    for (int trial = 0; trial < 3; ++trial) {
        auto v = random_star(rng, 50, 50, 40);
        const Box b = bounding_box(v);
        const int n = 1'000'000;
        int hits = 0;
        for (int i = 0; i < n; ++i) {
            hits += inside(v, rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)) ? 1 : 0;
        }
        const double mc = b.width() * b.height() * hits / n;
        CHECK(std::abs(mc - polygon_area(v)) / polygon_area(v) < 0.01);
    }
}

TEST_CASE("is_simple rejects bow ties and fold-backs") {
    std::vector<Point> bowtie{{0, 0}, {4, 4}, {4, 0}, {0, 4}};
    CHECK_FALSE(is_simple(bowtie));
    std::vector<Point> fold{{0, 0}, {4, 0}, {2, 0}, {2, 3}};
    CHECK_FALSE(is_simple(fold));
    std::vector<Point> ok{{0, 0}, {4, 0}, {4, 4}, {0, 4}};
    CHECK(is_simple(ok));
}

TEST_CASE("polygon_diameter is the largest vertex distance") {
    i2p::Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        std::vector<Point> pts;
        const int n = static_cast<int>(rng.uniform_int(3, 20));
        for (int k = 0; k < n; ++k) pts.push_back({rng.uniform(0, 100), rng.uniform(0, 100)});
        double brute = 0.0;
        for (const auto& p : pts)
            for (const auto& q : pts) brute = std::max(brute, std::hypot(p.x - q.x, p.y - q.y));
        CHECK(polygon_diameter(pts) == doctest::Approx(brute).epsilon(1e-12));
    }
}

TEST_CASE("rasterize") {
    // Pixel centres 2.5..5.5 by 3.5..7.5: 4 x 5.
    std::vector<Point> rect{{2, 3}, {6, 3}, {6, 8}, {2, 8}};
    const Mask m = rasterize(rect, 10, 10);
    CHECK(m.popcount() == 20);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) CHECK(m.at(x, y) == ((x >= 2 && x <= 5 && y >= 3 && y <= 7) ? 1 : 0));

    std::vector<Point> sliver{{1.1, 1.1}, {1.4, 1.1}, {1.2, 1.3}};
    CHECK(rasterize(sliver, 5, 5).popcount() == 0);
    std::vector<Point> outside{{0, 0}, {12, 0}, {0, 3}};
    CHECK_THROWS_AS(rasterize(outside, 10, 10), GeometryError);
}

TEST_CASE("rasterized area converges to polygon area") {
    i2p::Rng rng(17);
    for (int i = 0; i < 200; ++i) {
        std::vector<Point> poly;
        if (i % 2 == 0) {
            // Worst-case quantization error is about 1/w + 1/h, so sides stay >= 40.
            const double x0 = rng.uniform(0, 10), y0 = rng.uniform(0, 10);
            const double w = rng.uniform(40, 90), h = rng.uniform(40, 90);
            poly = {{x0, y0}, {x0 + w, y0}, {x0 + w, y0 + h}, {x0, y0 + h}};
        } else {
            do {
                poly = {{rng.uniform(0, 100), rng.uniform(0, 100)},
                        {rng.uniform(0, 100), rng.uniform(0, 100)},
                        {rng.uniform(0, 100), rng.uniform(0, 100)}};
            } while (polygon_area(poly) < 100.0 || min_altitude(poly) < 6.0);
        }
        const double area = polygon_area(poly);
        if (area < 100.0) continue;
        const double count = static_cast<double>(rasterize(poly, 100, 100).popcount());
        INFO(i, " area ", area, " count ", count);
        CHECK(std::abs(count - area) / area < 0.05);
    }
}

TEST_CASE("raster area in mm matches polygon area in mm for blobs") {
    // 96 px over 1920 mm: each pixel is 20 mm x 20 mm.
    const double px_per_mm = 96.0 / 1920.0;
    i2p::Rng rng(23);
    for (int i = 0; i < 50; ++i) {
        auto v = random_star(rng, 48, 48, 30);
        if (polygon_area(v) < 100.0) continue;
        const double mask_mm2 = rasterize(v, 96, 96).popcount() / (px_per_mm * px_per_mm);
        const double poly_mm2 = polygon_area(v) / (px_per_mm * px_per_mm);
        CHECK(std::abs(mask_mm2 - poly_mm2) / poly_mm2 < 0.05);
    }
}
