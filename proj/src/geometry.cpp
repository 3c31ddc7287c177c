#include "image2pci/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace i2p {

namespace {

bool finite(double v) { return std::isfinite(v); }

double cross(const Point& o, const Point& a, const Point& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

int orientation(const Point& a, const Point& b, const Point& c) {
    double v = cross(a, b, c);
    if (v > 0) return 1;
    if (v < 0) return -1;
    return 0;
}

bool on_segment(const Point& a, const Point& b, const Point& p) {
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
           p.y <= std::max(a.y, b.y);
}

} // namespace

PixelScale::PixelScale(double px_per_mm) : px_per_mm_(px_per_mm) {
    if (!finite(px_per_mm) || px_per_mm <= 0.0) {
        throw GeometryError("pixel scale must be positive and finite, got " + std::to_string(px_per_mm));
    }
}

PixelScale PixelScale::from_extent(double total_pixels, double actual_mm) {
    if (!finite(total_pixels) || !finite(actual_mm) || total_pixels <= 0.0 || actual_mm <= 0.0) {
        throw GeometryError("pixel extent and physical extent must be positive and finite");
    }
    return PixelScale(total_pixels / actual_mm);
}

ImageScale ImageScale::of(const ImageAnnotation& image) {
    return ImageScale{PixelScale::from_extent(image.width_px, image.footprint_mm[0]),
                      PixelScale::from_extent(image.height_px, image.footprint_mm[1])};
}

const PixelScale& ImageScale::along(const Point& p1, const Point& p2) const noexcept {
    return std::abs(p2.y - p1.y) > std::abs(p2.x - p1.x) ? y : x;
}

double pixel_threshold(const PixelScale& scale, double threshold_mm) {
    if (!finite(threshold_mm)) throw GeometryError("threshold must be finite");
    if (threshold_mm < 0.0) throw GeometryError("threshold must be non-negative");
    return scale.px_per_mm() * threshold_mm;
}

double width_between(const Point& p1, const Point& p2) {
    if (!finite(p1.x) || !finite(p1.y) || !finite(p2.x) || !finite(p2.y)) {
        throw GeometryError("width_between: non-finite coordinate");
    }
    if (p1 == p2) throw GeometryError("width_between: coincident points");
    return std::hypot(p2.x - p1.x, p2.y - p1.y);
}

Severity classify_width(double width_mm, const WidthBand& band) {
    if (width_mm <= band.low_max_mm) return Severity::Low;
    if (width_mm <= band.high_min_mm) return Severity::Medium;
    return Severity::High;
}

SeverityThresholds::SeverityThresholds(std::map<DistressType, WidthBand> bands, std::string provenance)
    : bands_(std::move(bands)), provenance_(std::move(provenance)) {
    for (const auto& [type, band] : bands_) {
        if (!finite(band.low_max_mm) || !finite(band.high_min_mm) || !(0.0 < band.low_max_mm) ||
            !(band.low_max_mm < band.high_min_mm)) {
            throw ConfigError("thresholds for '" + std::string(to_string(type)) +
                              "' must satisfy 0 < low_max_mm < high_min_mm");
        }
    }
}

SeverityThresholds SeverityThresholds::defaults() {
    return SeverityThresholds({{DistressType::Longitudinal, {10.0, 76.0}}, {DistressType::Transverse, {10.0, 76.0}}},
                              "per ASTM D6433-11 tables - verify against the standard");
}

SeverityThresholds SeverityThresholds::from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("thresholds: malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("thresholds: top level must be an object");
    std::map<DistressType, WidthBand> bands;
    std::string provenance;
    for (const auto& [key, value] : doc.items()) {
        if (key == "provenance") {
            if (!value.is_string()) throw ConfigError("thresholds: provenance must be a string");
            provenance = value.get<std::string>();
            continue;
        }
        auto type = parse_distress_type(key);
        if (!type) throw ConfigError("thresholds: unknown distress type '" + key + "'");
        if (!value.is_object() || !value.contains("low_max_mm") || !value.contains("high_min_mm") ||
            !value["low_max_mm"].is_number() || !value["high_min_mm"].is_number()) {
            throw ConfigError("thresholds: '" + key + "' needs numeric low_max_mm and high_min_mm");
        }
        bands[*type] = WidthBand{value["low_max_mm"].get<double>(), value["high_min_mm"].get<double>()};
    }
    return SeverityThresholds(std::move(bands), std::move(provenance));
}

SeverityThresholds SeverityThresholds::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("thresholds: cannot open " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

std::string SeverityThresholds::to_json() const {
    nlohmann::ordered_json doc;
    doc["provenance"] = provenance_;
    for (const auto& [type, band] : bands_) {
        doc[std::string(to_string(type))] = {{"low_max_mm", band.low_max_mm}, {"high_min_mm", band.high_min_mm}};
    }
    return doc.dump(2) + "\n";
}

const WidthBand* SeverityThresholds::band(DistressType t) const {
    auto it = bands_.find(t);
    return it == bands_.end() ? nullptr : &it->second;
}

WidthMeasurement measure_width(const std::array<double, 3>& samples_px, const PixelScale& scale, DistressType type,
                               const SeverityThresholds& thresholds) {
    const WidthBand* band = thresholds.band(type);
    if (band == nullptr) {
        throw GeometryError("no width band configured for distress type '" + std::string(to_string(type)) + "'");
    }
    for (double s : samples_px) {
        if (!finite(s) || s < 0.0) throw GeometryError("width samples must be finite and non-negative");
    }
    WidthMeasurement m;
    m.samples_px = samples_px;
    m.mean_px = (samples_px[0] + samples_px[1] + samples_px[2]) / 3.0;
    m.mean_mm = m.mean_px / scale.px_per_mm();
    m.severity = classify_width(m.mean_mm, *band);
    return m;
}

WidthMeasurement measure_width(std::span<const PointPair, 3> samples, const ImageScale& scale, DistressType type,
                               const SeverityThresholds& thresholds) {
    std::array<double, 3> px{};
    double dx = 0.0;
    double dy = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        px[i] = width_between(samples[i].first, samples[i].second);
        dx += std::abs(samples[i].second.x - samples[i].first.x);
        dy += std::abs(samples[i].second.y - samples[i].first.y);
    }
    const PixelScale& axis = dy > dx ? scale.y : scale.x;
    return measure_width(px, axis, type, thresholds);
}

double polygon_area(std::span<const Point> v) {
    if (v.size() < 3) throw GeometryError("polygon needs at least 3 vertices");
    double twice = 0.0;
    for (std::size_t i = 0, n = v.size(); i < n; ++i) {
        const Point& a = v[i];
        const Point& b = v[(i + 1) % n];
        twice += a.x * b.y - b.x * a.y;
    }
    return std::abs(twice) * 0.5;
}

double polygon_area(const PolygonAnnotation& poly) { return polygon_area(poly.vertices); }

bool segments_intersect(const Point& a, const Point& b, const Point& c, const Point& d) {
    int o1 = orientation(a, b, c);
    int o2 = orientation(a, b, d);
    int o3 = orientation(c, d, a);
    int o4 = orientation(c, d, b);
    if (o1 != o2 && o3 != o4) return true;
    if (o1 == 0 && on_segment(a, b, c)) return true;
    if (o2 == 0 && on_segment(a, b, d)) return true;
    if (o3 == 0 && on_segment(c, d, a)) return true;
    if (o4 == 0 && on_segment(c, d, b)) return true;
    return false;
}

bool is_simple(std::span<const Point> v) {
    const std::size_t n = v.size();
    if (n < 3) return false;
    for (std::size_t i = 0; i < n; ++i) {
        if (v[i] == v[(i + 1) % n]) return false;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const Point& a = v[i];
        const Point& b = v[(i + 1) % n];
        for (std::size_t j = i + 1; j < n; ++j) {
            const Point& c = v[j];
            const Point& d = v[(j + 1) % n];
            const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
            if (!adjacent) {
                if (segments_intersect(a, b, c, d)) return false;
                continue;
            }
            // Adjacent edges share one vertex; they must not fold back onto each other.
            const Point& shared = (j == i + 1) ? b : a;
            const Point& p = (j == i + 1) ? a : b;
            const Point& q = (j == i + 1) ? d : c;
            if (orientation(p, shared, q) == 0) {
                double dot = (p.x - shared.x) * (q.x - shared.x) + (p.y - shared.y) * (q.y - shared.y);
                if (dot > 0) return false;
            }
        }
    }
    return true;
}

std::vector<Point> convex_hull(std::span<const Point> points) {
    std::vector<Point> pts(points.begin(), points.end());
    std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return pts;
    std::vector<Point> hull(2 * pts.size());
    std::size_t k = 0;
    for (const Point& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

double polygon_diameter(std::span<const Point> vertices) {
    std::vector<Point> h = convex_hull(vertices);
    auto dist = [](const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); };
    if (h.size() < 2) return 0.0;
    if (h.size() == 2) return dist(h[0], h[1]);
    const std::size_t n = h.size();
    double best = 0.0;
    std::size_t j = 1;
    for (std::size_t i = 0; i < n; ++i) {
        const Point& a = h[i];
        const Point& b = h[(i + 1) % n];
        // Advance the antipodal pointer while the triangle area keeps growing.
        while (std::abs(cross(a, b, h[(j + 1) % n])) > std::abs(cross(a, b, h[j]))) j = (j + 1) % n;
        best = std::max({best, dist(a, h[j]), dist(b, h[j])});
    }
    return best;
}

Box bounding_box(std::span<const Point> vertices) {
    if (vertices.empty()) throw GeometryError("bounding_box of an empty vertex list");
    Box b{vertices[0].x, vertices[0].y, vertices[0].x, vertices[0].y};
    for (const Point& p : vertices) {
        b.x0 = std::min(b.x0, p.x);
        b.y0 = std::min(b.y0, p.y);
        b.x1 = std::max(b.x1, p.x);
        b.y1 = std::max(b.y1, p.y);
    }
    return b;
}

std::size_t Mask::popcount() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

Mask rasterize(std::span<const Point> vertices, int width, int height) {
    if (width <= 0 || height <= 0) throw GeometryError("raster size must be positive");
    Mask mask(width, height);
    rasterize_into(mask, vertices);
    return mask;
}

void rasterize_into(Mask& mask, std::span<const Point> v) {
    if (v.size() < 3) throw GeometryError("polygon needs at least 3 vertices");
    for (const Point& p : v) {
        if (!finite(p.x) || !finite(p.y) || p.x < 0.0 || p.y < 0.0 || p.x > mask.width || p.y > mask.height) {
            throw GeometryError("polygon vertex outside raster bounds");
        }
    }
    const std::size_t n = v.size();
    std::vector<double> xs;
    for (int row = 0; row < mask.height; ++row) {
        const double yc = row + 0.5;
        xs.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const Point& a = v[i];
            const Point& b = v[(i + 1) % n];
            if ((a.y <= yc) != (b.y <= yc)) {
                xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            // Centres x + 0.5 in [xs[k], xs[k+1]).
            int first = static_cast<int>(std::ceil(xs[k] - 0.5));
            int last = static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1;
            first = std::max(first, 0);
            last = std::min(last, mask.width - 1);
            auto* rowp = mask.bits.data() + static_cast<std::size_t>(row) * mask.width;
            for (int x = first; x <= last; ++x) rowp[x] = 1;
        }
    }
}

} // namespace i2p
