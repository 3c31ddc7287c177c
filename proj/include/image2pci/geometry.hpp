#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "image2pci/annotation.hpp"

namespace i2p {

class GeometryError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Pixels per millimetre along one image axis.
class PixelScale {
public:
    explicit PixelScale(double px_per_mm);
    static PixelScale from_extent(double total_pixels, double actual_mm);

    double px_per_mm() const noexcept { return px_per_mm_; }
    double to_mm(double px) const noexcept { return px / px_per_mm_; }

private:
    double px_per_mm_;
};

struct ImageScale {
    PixelScale x;
    PixelScale y;

    static ImageScale of(const ImageAnnotation& image);
    // Axis whose component dominates the displacement p1 -> p2 (ties go to x).
    const PixelScale& along(const Point& p1, const Point& p2) const noexcept;
};

// Pixel count representing a physical threshold: px_per_mm * threshold_mm.
double pixel_threshold(const PixelScale& scale, double threshold_mm);

double width_between(const Point& p1, const Point& p2);

struct WidthBand {
    double low_max_mm = 0.0;
    double high_min_mm = 0.0;
};

// Band edges belong to the lower band: w <= low_max is Low, w <= high_min is Medium.
Severity classify_width(double width_mm, const WidthBand& band);

class SeverityThresholds {
public:
    SeverityThresholds() = default;
    SeverityThresholds(std::map<DistressType, WidthBand> bands, std::string provenance);

    // Linear-crack bands low_max 10 mm, high_min 76 mm.
    static SeverityThresholds defaults();
    static SeverityThresholds from_json(const std::string& text);
    static SeverityThresholds load(const std::filesystem::path& file);
    std::string to_json() const;

    const WidthBand* band(DistressType t) const;
    const std::map<DistressType, WidthBand>& bands() const noexcept { return bands_; }
    const std::string& provenance() const noexcept { return provenance_; }

private:
    std::map<DistressType, WidthBand> bands_;
    std::string provenance_;
};

struct WidthMeasurement {
    std::array<double, 3> samples_px{};
    double mean_px = 0.0;
    double mean_mm = 0.0;
    Severity severity = Severity::Low;
};

using PointPair = std::pair<Point, Point>;

// Three two-point picks across the distress; the conversion scale is taken from
// the axis that dominates the summed pick displacements.
WidthMeasurement measure_width(std::span<const PointPair, 3> samples, const ImageScale& scale, DistressType type,
                               const SeverityThresholds& thresholds);
WidthMeasurement measure_width(const std::array<double, 3>& samples_px, const PixelScale& scale, DistressType type,
                               const SeverityThresholds& thresholds);

double polygon_area(std::span<const Point> vertices);
double polygon_area(const PolygonAnnotation& poly);

bool segments_intersect(const Point& a, const Point& b, const Point& c, const Point& d);
// Pairwise edge test: non-adjacent edges may not touch, adjacent edges may only
// share their common vertex.
bool is_simple(std::span<const Point> vertices);

std::vector<Point> convex_hull(std::span<const Point> points);
// Largest vertex-to-vertex distance, via rotating calipers on the hull.
double polygon_diameter(std::span<const Point> vertices);

struct Box {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
    double width() const noexcept { return x1 - x0; }
    double height() const noexcept { return y1 - y0; }
};
Box bounding_box(std::span<const Point> vertices);

struct Mask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bits;  // row-major, 0 or 1

    Mask() = default;
    Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

    std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::size_t popcount() const;
    friend bool operator==(const Mask&, const Mask&) = default;
};

// Even-odd scanline fill; a pixel is set when its centre lies inside.
Mask rasterize(std::span<const Point> vertices, int width, int height);
void rasterize_into(Mask& mask, std::span<const Point> vertices);

} // namespace i2p
