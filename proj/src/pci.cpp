#include "image2pci/pci.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "image2pci/geometry.hpp"

namespace i2p {

namespace {

std::string curve_name(DistressType t, Severity s) {
    return std::string(to_string(t)) + "|" + std::string(to_string(s));
}

void validate_curve(const Curve& c, const std::string& name) {
    if (c.size() < 2) throw ConfigError("curve '" + name + "' needs at least 2 points");
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (!std::isfinite(c[i].x) || !std::isfinite(c[i].y)) throw ConfigError("curve '" + name + "' has non-finite values");
        if (c[i].y < 0.0 || c[i].y > 100.0) throw ConfigError("curve '" + name + "' values must lie in [0, 100]");
        if (i > 0 && !(c[i].x > c[i - 1].x)) throw ConfigError("curve '" + name + "' x must be strictly increasing");
        if (i > 0 && c[i].y < c[i - 1].y) throw ConfigError("curve '" + name + "' y must be non-decreasing");
    }
}

// Evaluates both curves at every breakpoint of either; with piecewise-linear
// interpolation in log10(x) that is enough to decide pointwise ordering.
bool dominated(const Curve& lower, const Curve& upper) {
    for (const Curve* c : {&lower, &upper}) {
        for (const CurvePoint& p : *c) {
            if (interpolate_log10(lower, p.x) > interpolate_log10(upper, p.x)) return false;
        }
    }
    return true;
}

Curve parse_curve(const nlohmann::json& j, const std::string& name) {
    if (!j.is_array()) throw ConfigError("curve '" + name + "' must be an array of [x, y] pairs");
    Curve c;
    for (const auto& p : j) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw ConfigError("curve '" + name + "' points must be [x, y]");
        }
        c.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return c;
}

} // namespace

double interpolate_log10(const Curve& c, double x) {
    if (!(x > c.front().x)) return c.front().y;
    if (x >= c.back().x) return c.back().y;
    const double lx = std::log10(x);
    for (std::size_t i = 1; i < c.size(); ++i) {
        if (x <= c[i].x) {
            const double l0 = std::log10(c[i - 1].x);
            const double l1 = std::log10(c[i].x);
            const double t = (lx - l0) / (l1 - l0);
            return c[i - 1].y + t * (c[i].y - c[i - 1].y);
        }
    }
    return c.back().y;
}

double interpolate_linear(const Curve& c, double x) {
    if (x <= c.front().x) return c.front().y;
    if (x >= c.back().x) return c.back().y;
    for (std::size_t i = 1; i < c.size(); ++i) {
        if (x <= c[i].x) {
            const double t = (x - c[i - 1].x) / (c[i].x - c[i - 1].x);
            return c[i - 1].y + t * (c[i].y - c[i - 1].y);
        }
    }
    return c.back().y;
}

DeductCurveSet::DeductCurveSet(std::map<DeductKey, Curve> deduct, std::map<int, Curve> correction,
                               std::string provenance)
    : deduct_(std::move(deduct)), correction_(std::move(correction)), provenance_(std::move(provenance)) {
    for (const auto& [key, curve] : deduct_) {
        if (key.first == DistressType::Manhole) throw ConfigError("manhole carries no deduct curve");
        validate_curve(curve, curve_name(key.first, key.second));
        if (!(curve.front().x > 0.0)) {
            throw ConfigError("deduct curve '" + curve_name(key.first, key.second) + "' needs positive densities");
        }
    }
    for (const auto& [q, curve] : correction_) {
        if (q < 1) throw ConfigError("correction curve keys must be integers >= 1");
        validate_curve(curve, "correction q=" + std::to_string(q));
    }
    if (auto it = correction_.find(1); it != correction_.end()) {
        for (const CurvePoint& p : it->second) {
            if (std::abs(p.x - p.y) > 1e-9) throw ConfigError("correction curve q=1 must be the identity");
        }
    } else if (!correction_.empty()) {
        throw ConfigError("correction curves must include q=1");
    }
    for (DistressType t : kAllDistressTypes) {
        const auto lo = deduct_.find({t, Severity::Low});
        const auto md = deduct_.find({t, Severity::Medium});
        const auto hi = deduct_.find({t, Severity::High});
        if (lo != deduct_.end() && md != deduct_.end() && !dominated(lo->second, md->second)) {
            throw ConfigError("deduct curves for '" + std::string(to_string(t)) + "' must satisfy low <= medium");
        }
        if (md != deduct_.end() && hi != deduct_.end() && !dominated(md->second, hi->second)) {
            throw ConfigError("deduct curves for '" + std::string(to_string(t)) + "' must satisfy medium <= high");
        }
    }
}

DeductCurveSet DeductCurveSet::from_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("curves: malformed JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("deduct") || !doc["deduct"].is_object() || !doc.contains("correction") ||
        !doc["correction"].is_object()) {
        throw ConfigError("curves: expected object with 'deduct' and 'correction' maps");
    }
    std::map<DeductKey, Curve> deduct;
    for (const auto& [key, value] : doc["deduct"].items()) {
        const auto bar = key.find('|');
        if (bar == std::string::npos) throw ConfigError("curves: deduct key '" + key + "' must be 'type|severity'");
        auto type = parse_distress_type(key.substr(0, bar));
        auto sev = parse_severity(key.substr(bar + 1));
        if (!type || !sev) throw ConfigError("curves: unknown deduct key '" + key + "'");
        deduct[{*type, *sev}] = parse_curve(value, key);
    }
    std::map<int, Curve> correction;
    for (const auto& [key, value] : doc["correction"].items()) {
        int q = 0;
        try {
            std::size_t used = 0;
            q = std::stoi(key, &used);
            if (used != key.size()) throw std::invalid_argument(key);
        } catch (const std::exception&) {
            throw ConfigError("curves: correction key '" + key + "' is not an integer");
        }
        correction[q] = parse_curve(value, "correction " + key);
    }
    std::string provenance = doc.value("provenance", std::string());
    return DeductCurveSet(std::move(deduct), std::move(correction), std::move(provenance));
}

DeductCurveSet DeductCurveSet::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("curves: cannot open " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

std::string DeductCurveSet::to_json() const {
    nlohmann::ordered_json doc;
    doc["provenance"] = provenance_;
    nlohmann::ordered_json d = nlohmann::ordered_json::object();
    for (const auto& [key, curve] : deduct_) {
        nlohmann::ordered_json pts = nlohmann::ordered_json::array();
        for (const auto& p : curve) pts.push_back({p.x, p.y});
        d[curve_name(key.first, key.second)] = pts;
    }
    nlohmann::ordered_json c = nlohmann::ordered_json::object();
    for (const auto& [q, curve] : correction_) {
        nlohmann::ordered_json pts = nlohmann::ordered_json::array();
        for (const auto& p : curve) pts.push_back({p.x, p.y});
        c[std::to_string(q)] = pts;
    }
    doc["deduct"] = d;
    doc["correction"] = c;
    return doc.dump(2) + "\n";
}

const Curve& DeductCurveSet::deduct_curve(DistressType type, Severity severity) const {
    auto it = deduct_.find({type, severity});
    if (it == deduct_.end()) throw ConfigError("no deduct curve for '" + curve_name(type, severity) + "'");
    return it->second;
}

const Curve& DeductCurveSet::correction_curve(int q) const {
    if (correction_.empty()) throw ConfigError("no correction curves configured");
    if (auto it = correction_.find(q); it != correction_.end()) return it->second;
    if (q > correction_.rbegin()->first) return correction_.rbegin()->second;
    throw ConfigError("no correction curve for q=" + std::to_string(q));
}

double density(const DistressRecord& record, double sample_area_m2) {
    if (!(sample_area_m2 > 0.0) || !std::isfinite(sample_area_m2)) {
        throw std::invalid_argument("sample area must be positive");
    }
    return 100.0 * std::max(record.extent, 0.0) / sample_area_m2;
}

double deduct_value(const DeductCurveSet& curves, DistressType type, Severity severity, double density_pct) {
    if (!(density_pct >= 0.0)) throw std::invalid_argument("density must be non-negative");
    return interpolate_log10(curves.deduct_curve(type, severity), density_pct);
}

double allowable_deducts(double highest_deduct) {
    return std::min(10.0, 1.0 + (9.0 / 98.0) * (100.0 - highest_deduct));
}

std::string pci_rating(double pci) {
    if (pci > 85.0) return "good";
    if (pci > 70.0) return "satisfactory";
    if (pci > 55.0) return "fair";
    if (pci > 40.0) return "poor";
    if (pci > 25.0) return "very poor";
    if (pci > 10.0) return "serious";
    return "failed";
}

PciReport compute_pci(std::span<const DistressRecord> records, double sample_area_m2, const DeductCurveSet& curves) {
    PciReport report;
    for (const DistressRecord& r : records) {
        if (r.distress_type == DistressType::Manhole) {
            throw std::invalid_argument("manhole cannot be a distress record");
        }
        const double d = density(r, sample_area_m2);
        report.densities.push_back(d);
        report.deducts.push_back(deduct_value(curves, r.distress_type, r.severity, d));
    }

    // Descending by value, ties by record index.
    std::vector<std::size_t> order(report.deducts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return report.deducts[a] > report.deducts[b]; });
    std::vector<double> sorted;
    sorted.reserve(order.size());
    for (std::size_t i : order) sorted.push_back(report.deducts[i]);

    const auto significant = std::count_if(sorted.begin(), sorted.end(), [](double d) { return d > kNegligibleDeduct; });
    if (significant == 0) {
        report.max_cdv = std::accumulate(sorted.begin(), sorted.end(), 0.0);
    } else {
        const double m = allowable_deducts(sorted.front());
        report.allowed_deducts = m;
        if (static_cast<double>(sorted.size()) > m) {
            const auto whole = static_cast<std::size_t>(std::floor(m));
            const double frac = m - static_cast<double>(whole);
            sorted.resize(whole + 1);
            sorted[whole] *= frac;
        }
        std::vector<double> current = sorted;
        while (true) {
            int q = 0;
            for (double d : current) q += d > kNegligibleDeduct ? 1 : 0;
            const double tdv = std::accumulate(current.begin(), current.end(), 0.0);
            const double cdv = interpolate_linear(curves.correction_curve(q), tdv);
            report.iterations.push_back({q, tdv, cdv, current});
            report.max_cdv = std::max(report.max_cdv, cdv);
            if (q <= 1) break;
            // `current` stays sorted descending, so the last entry above the
            // negligible level is the smallest one.
            for (std::size_t i = current.size(); i-- > 0;) {
                if (current[i] > kNegligibleDeduct) {
                    current[i] = kNegligibleDeduct;
                    break;
                }
            }
        }
    }
    report.pci = std::clamp(100.0 - report.max_cdv, 0.0, 100.0);
    report.rating = pci_rating(report.pci);
    return report;
}

double sample_area_m2(const ImageAnnotation& image) {
    return image.footprint_mm[0] * image.footprint_mm[1] / 1e6;
}

std::vector<DistressRecord> distress_records(const ImageAnnotation& image) {
    const double sx = image.footprint_mm[0] / image.width_px;
    const double sy = image.footprint_mm[1] / image.height_px;
    std::vector<DistressRecord> records;
    for (std::size_t i = 0; i < image.annotations.size(); ++i) {
        const PolygonAnnotation& a = image.annotations[i];
        if (a.distress_type == DistressType::Manhole) continue;
        if (!a.severity) {
            throw DataError(DataErrorKind::MissingSeverity, image.image_id, i, "non-manhole annotation has no severity");
        }
        std::vector<Point> mm;
        mm.reserve(a.vertices.size());
        for (const Point& p : a.vertices) mm.push_back({p.x * sx, p.y * sy});
        DistressRecord r{a.distress_type, *a.severity, 0.0};
        r.extent = is_linear(a.distress_type) ? polygon_diameter(mm) / 1e3 : polygon_area(mm) / 1e6;
        records.push_back(r);
    }
    return records;
}

PciReport image_pci(const ImageAnnotation& image, const DeductCurveSet& curves) {
    const auto records = distress_records(image);
    return compute_pci(records, sample_area_m2(image), curves);
}

std::vector<ImageAnnotation> label_dataset(std::vector<ImageAnnotation> dataset, const DeductCurveSet& curves) {
    for (auto& image : dataset) image.pci_label = image_pci(image, curves).pci;
    return dataset;
}

} // namespace i2p
