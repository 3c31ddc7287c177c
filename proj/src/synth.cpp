#include "image2pci/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "image2pci/errors.hpp"
#include "image2pci/rng.hpp"

namespace i2p {

using nlohmann::ordered_json;

namespace {

constexpr double kPi = 3.14159265358979323846;

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("synth config: " + what);
}

bool point_in_polygon(const std::vector<Point>& v, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        if ((v[i].y > y) != (v[j].y > y)) {
            const double xc = v[i].x + (y - v[i].y) * (v[j].x - v[i].x) / (v[j].y - v[i].y);
            if (x < xc) in = !in;
        }
    }
    return in;
}

Severity draw_severity(Rng& rng, const std::array<double, 3>& weights) {
    const double total = weights[0] + weights[1] + weights[2];
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < 3; ++i) {
        if (u < weights[i]) return kAllSeverities[i];
        u -= weights[i];
    }
    return Severity::High;
}

// Thick polyline outline: left offsets forward, right offsets backward, with
// mitred joins so the perpendicular width is constant along every segment.
std::vector<Point> thicken(const std::vector<Point>& path, double width) {
    const std::size_t n = path.size();
    std::vector<Point> normals;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double dx = path[i + 1].x - path[i].x, dy = path[i + 1].y - path[i].y;
        const double len = std::hypot(dx, dy);
        normals.push_back({-dy / len, dx / len});
    }
    std::vector<Point> left, right;
    for (std::size_t i = 0; i < n; ++i) {
        Point nrm;
        double scale = 1.0;
        if (i == 0) {
            nrm = normals.front();
        } else if (i == n - 1) {
            nrm = normals.back();
        } else {
            const Point a = normals[i - 1], b = normals[i];
            const double mx = a.x + b.x, my = a.y + b.y, ml = std::hypot(mx, my);
            nrm = {mx / ml, my / ml};
            scale = 1.0 / (nrm.x * a.x + nrm.y * a.y);
        }
        const double h = width / 2.0 * scale;
        left.push_back({path[i].x + nrm.x * h, path[i].y + nrm.y * h});
        right.push_back({path[i].x - nrm.x * h, path[i].y - nrm.y * h});
    }
    std::vector<Point> poly = left;
    poly.insert(poly.end(), right.rbegin(), right.rend());
    return poly;
}

struct Crack {
    std::vector<Point> polygon;
    DistressType type;
    double width_px;
};

// Returns false if no placement fits inside the image.
bool make_crack(Rng& rng, const SynthConfig& cfg, const ImageScale& scale, Crack& out) {
    const double size = cfg.image_size_px;
    const bool longitudinal = rng.uniform() < 0.5;
    const DistressType type = longitudinal ? DistressType::Longitudinal : DistressType::Transverse;
    const double base_angle = longitudinal ? kPi / 2.0 : 0.0;
    const double heading = base_angle + rng.uniform(-0.2, 0.2);
    // Width is measured across the crack: horizontally for longitudinal cracks.
    const PixelScale& across = longitudinal ? scale.x : scale.y;
    const PixelScale& along = longitudinal ? scale.y : scale.x;
    const double width_mm = rng.uniform(cfg.crack_width_mm.lo, cfg.crack_width_mm.hi);
    const double width_px = width_mm * across.px_per_mm();
    double length_px = rng.uniform(cfg.crack_length_mm.lo, cfg.crack_length_mm.hi) * along.px_per_mm();
    const int segments = static_cast<int>(rng.uniform_int(1, 3));
    std::vector<double> headings;
    for (int s = 0; s < segments; ++s) headings.push_back(heading + (s == 0 ? 0.0 : rng.uniform(-0.3, 0.3)));

    const double margin = width_px / 2.0 + 1.0;
    for (int attempt = 0; attempt < 8; ++attempt, length_px *= 0.75) {
        std::vector<Point> path{{0.0, 0.0}};
        for (double h : headings) {
            const double seg = length_px / segments;
            path.push_back({path.back().x + seg * std::cos(h), path.back().y + seg * std::sin(h)});
        }
        const Box b = bounding_box(path);
        const double span_x = size - 2 * margin - b.width(), span_y = size - 2 * margin - b.height();
        if (span_x <= 0 || span_y <= 0) continue;
        const double ox = margin - b.x0 + rng.uniform(0, span_x), oy = margin - b.y0 + rng.uniform(0, span_y);
        for (Point& p : path) p = {p.x + ox, p.y + oy};
        auto poly = thicken(path, width_px);
        const bool inside = std::all_of(poly.begin(), poly.end(),
                                        [&](const Point& p) { return p.x >= 0 && p.y >= 0 && p.x <= size && p.y <= size; });
        if (!inside || !is_simple(poly)) continue;
        out = {std::move(poly), type, width_px};
        return true;
    }
    return false;
}

std::vector<Point> make_blob(Rng& rng, const SynthConfig& cfg, const ImageScale& scale) {
    const double size = cfg.image_size_px;
    const double ppm = std::min(scale.x.px_per_mm(), scale.y.px_per_mm());
    const double r = std::min(rng.uniform(cfg.blob_radius_mm.lo, cfg.blob_radius_mm.hi) * ppm, size / 2.0 - 1.0);
    const double cx = rng.uniform(r, size - r), cy = rng.uniform(r, size - r);
    const int k = static_cast<int>(rng.uniform_int(7, 12));
    std::vector<Point> v;
    for (int i = 0; i < k; ++i) {
        const double a = 2.0 * kPi * (i + rng.uniform(0.15, 0.85)) / k;
        const double rad = r * rng.uniform(0.55, 1.0);
        v.push_back({cx + rad * std::cos(a), cy + rad * std::sin(a)});
    }
    return v;
}

std::uint8_t clamp_gray(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Texture darkening for pattern distress at pixel (x, y).
double pattern_shade(DistressType type, Severity sev, int x, int y, Rng& rng) {
    const int s = static_cast<int>(sev);
    switch (type) {
    case DistressType::Alligator: {
        // Interlocking diagonal crack network.
        const bool line = (x + y) % 5 == 0 || ((x - y) % 7 + 7) % 7 == 0;
        return (line ? 45.0 + 20.0 * s : 12.0 + 6.0 * s) + rng.uniform(-4, 4);
    }
    case DistressType::Block: {
        const bool line = x % 9 == 0 || y % 9 == 0;
        return (line ? 40.0 + 20.0 * s : 4.0 * s) + rng.uniform(-4, 4);
    }
    case DistressType::Patch:
        return 18.0 + 14.0 * s + rng.uniform(-2, 2);
    default:
        return 0.0;
    }
}

} // namespace

void SynthConfig::validate() const {
    require(image_size_px >= 64, "image_size_px must be at least 64");
    require(footprint_mm[0] > 0 && footprint_mm[1] > 0, "footprint_mm must be positive");
    require(n_images >= 0, "n_images must be non-negative");
    require(crack_count.lo >= 0 && crack_count.lo <= crack_count.hi, "crack_count range is empty");
    require(blob_count.lo >= 0 && blob_count.lo <= blob_count.hi, "blob_count range is empty");
    require(crack_width_mm.lo > 0 && crack_width_mm.lo <= crack_width_mm.hi, "crack_width_mm must be a positive range");
    require(crack_length_mm.lo > 0 && crack_length_mm.lo <= crack_length_mm.hi, "crack_length_mm must be a positive range");
    require(blob_radius_mm.lo > 0 && blob_radius_mm.lo <= blob_radius_mm.hi, "blob_radius_mm must be a positive range");
    require(clean_fraction >= 0 && clean_fraction <= 1, "clean_fraction must lie in [0, 1]");
    require(std::all_of(pattern_severity_weights.begin(), pattern_severity_weights.end(), [](double w) { return w >= 0; }) &&
                pattern_severity_weights[0] + pattern_severity_weights[1] + pattern_severity_weights[2] > 0,
            "pattern_severity_weights must be non-negative with a positive sum");
    require(base_gray >= 0 && base_gray <= 255, "base_gray must lie in [0, 255]");
    require(speckle_amplitude >= 0 && speckle_amplitude <= 127, "speckle_amplitude must lie in [0, 127]");
}

std::string SynthConfig::to_json() const {
    ordered_json j;
    j["image_size_px"] = image_size_px;
    j["footprint_mm"] = {footprint_mm[0], footprint_mm[1]};
    j["n_images"] = n_images;
    j["seed"] = seed;
    j["crack_count"] = {crack_count.lo, crack_count.hi};
    j["blob_count"] = {blob_count.lo, blob_count.hi};
    j["crack_width_mm"] = {crack_width_mm.lo, crack_width_mm.hi};
    j["crack_length_mm"] = {crack_length_mm.lo, crack_length_mm.hi};
    j["blob_radius_mm"] = {blob_radius_mm.lo, blob_radius_mm.hi};
    j["clean_fraction"] = clean_fraction;
    j["pattern_severity_weights"] = {pattern_severity_weights[0], pattern_severity_weights[1], pattern_severity_weights[2]};
    j["base_gray"] = base_gray;
    j["speckle_amplitude"] = speckle_amplitude;
    return j.dump(2) + "\n";
}

SynthConfig SynthConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth config: malformed JSON: ") + e.what());
    }
    require(j.is_object(), "top level must be an object");
    SynthConfig c;
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            const auto& v = it.value();
            if (k == "image_size_px") c.image_size_px = v.get<int>();
            else if (k == "footprint_mm") c.footprint_mm = {v.at(0).get<double>(), v.at(1).get<double>()};
            else if (k == "n_images") c.n_images = v.get<int>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "crack_count") c.crack_count = {v.at(0).get<int>(), v.at(1).get<int>()};
            else if (k == "blob_count") c.blob_count = {v.at(0).get<int>(), v.at(1).get<int>()};
            else if (k == "crack_width_mm") c.crack_width_mm = {v.at(0).get<double>(), v.at(1).get<double>()};
            else if (k == "crack_length_mm") c.crack_length_mm = {v.at(0).get<double>(), v.at(1).get<double>()};
            else if (k == "blob_radius_mm") c.blob_radius_mm = {v.at(0).get<double>(), v.at(1).get<double>()};
            else if (k == "clean_fraction") c.clean_fraction = v.get<double>();
            else if (k == "pattern_severity_weights")
                c.pattern_severity_weights = {v.at(0).get<double>(), v.at(1).get<double>(), v.at(2).get<double>()};
            else if (k == "base_gray") c.base_gray = v.get<int>();
            else if (k == "speckle_amplitude") c.speckle_amplitude = v.get<int>();
            else throw ConfigError("synth config: unknown field '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

SynthConfig SynthConfig::right_skewed() {
    SynthConfig c;
    c.clean_fraction = 0.45;
    c.crack_count = {0, 2};
    c.blob_count = {0, 1};
    c.crack_width_mm = {6.0, 40.0};
    c.crack_length_mm = {200.0, 900.0};
    c.blob_radius_mm = {100.0, 250.0};
    c.pattern_severity_weights = {0.6, 0.3, 0.1};
    return c;
}

std::string synth_image_id(std::size_t index) {
    std::string digits = std::to_string(index);
    if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
    return "syn_" + digits;
}

SynthSample generate_sample(const SynthConfig& cfg, std::size_t index, const SeverityThresholds& thresholds,
                            const DeductCurveSet& curves) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, index));
    const int size = cfg.image_size_px;

    SynthSample s;
    s.annotation.image_id = synth_image_id(index);
    s.annotation.width_px = size;
    s.annotation.height_px = size;
    s.annotation.footprint_mm = cfg.footprint_mm;
    const ImageScale scale = ImageScale::of(s.annotation);

    s.image = GrayImage(size, size);
    for (auto& px : s.image.pixels) {
        px = clamp_gray(cfg.base_gray + static_cast<double>(rng.uniform_int(-cfg.speckle_amplitude, cfg.speckle_amplitude)));
    }
    s.mask = Mask(size, size);

    const bool clean = rng.uniform() < cfg.clean_fraction;
    const int n_blobs = clean ? 0 : static_cast<int>(rng.uniform_int(cfg.blob_count.lo, cfg.blob_count.hi));
    const int n_cracks = clean ? 0 : static_cast<int>(rng.uniform_int(cfg.crack_count.lo, cfg.crack_count.hi));

    constexpr std::array<DistressType, 3> kPatterns{DistressType::Alligator, DistressType::Block, DistressType::Patch};
    for (int b = 0; b < n_blobs; ++b) {
        PolygonAnnotation a;
        a.vertices = make_blob(rng, cfg, scale);
        a.distress_type = kPatterns[static_cast<std::size_t>(rng.uniform_int(0, 2))];
        a.severity = draw_severity(rng, cfg.pattern_severity_weights);
        const Mask m = rasterize(a.vertices, size, size);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                if (!m.at(x, y)) continue;
                s.image.at(x, y) = clamp_gray(s.image.at(x, y) - pattern_shade(a.distress_type, *a.severity, x, y, rng));
            }
        }
        rasterize_into(s.mask, a.vertices);
        s.annotation.annotations.push_back(std::move(a));
    }

    for (int c = 0; c < n_cracks; ++c) {
        Crack crack;
        if (!make_crack(rng, cfg, scale, crack)) continue;
        const PixelScale& across = crack.type == DistressType::Longitudinal ? scale.x : scale.y;
        const auto measured = measure_width(std::array<double, 3>{crack.width_px, crack.width_px, crack.width_px}, across,
                                            crack.type, thresholds);
        // Coverage from 4x4 supersampling keeps sub-pixel cracks visible.
        const Box box = bounding_box(crack.polygon);
        const int x0 = std::max(0, static_cast<int>(std::floor(box.x0))), x1 = std::min(size - 1, static_cast<int>(std::ceil(box.x1)));
        const int y0 = std::max(0, static_cast<int>(std::floor(box.y0))), y1 = std::min(size - 1, static_cast<int>(std::ceil(box.y1)));
        const double crack_gray = 35.0 + rng.uniform(-8, 8);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                int hits = 0;
                for (int sy = 0; sy < 4; ++sy)
                    for (int sx = 0; sx < 4; ++sx) hits += point_in_polygon(crack.polygon, x + (sx + 0.5) / 4.0, y + (sy + 0.5) / 4.0);
                if (hits == 0) continue;
                const double cov = hits / 16.0;
                s.image.at(x, y) = clamp_gray(s.image.at(x, y) * (1.0 - cov) + crack_gray * cov);
            }
        }
        rasterize_into(s.mask, crack.polygon);
        s.annotation.annotations.push_back({std::move(crack.polygon), crack.type, measured.severity});
    }

    validate(s.annotation);
    s.annotation.pci_label = image_pci(s.annotation, curves).pci;
    return s;
}

std::vector<ImageAnnotation> generate(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                      const SeverityThresholds& thresholds, const DeductCurveSet& curves) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    std::filesystem::create_directories(out_dir / "annotations", ec);
    if (ec || !std::filesystem::is_directory(out_dir / "annotations")) {
        throw std::runtime_error("cannot create output directory " + out_dir.string());
    }
    std::vector<ImageAnnotation> out;
    std::vector<std::string> manifest;
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.n_images); ++i) {
        SynthSample s = generate_sample(cfg, i, thresholds, curves);
        write_png(image_path(out_dir, s.annotation.image_id), s.image);
        const std::string rel = "annotations/" + s.annotation.image_id + ".json";
        save_annotation_file(s.annotation, out_dir / rel);
        manifest.push_back(rel);
        out.push_back(std::move(s.annotation));
    }
    write_manifest(out_dir / "manifest.txt", manifest);
    std::ofstream cfg_out(out_dir / "config.json", std::ios::binary | std::ios::trunc);
    if (!cfg_out) throw std::runtime_error("cannot write " + (out_dir / "config.json").string());
    cfg_out << cfg.to_json();
    return out;
}

DatasetSplit split(std::vector<std::string> entries, const std::array<double, 3>& ratios, std::uint64_t seed) {
    if (std::any_of(ratios.begin(), ratios.end(), [](double r) { return !(r >= 0.0); })) {
        throw ConfigError("split ratios must be non-negative");
    }
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    Rng rng(seed);
    rng.shuffle(entries);
    const std::size_t n = entries.size();
    const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n))));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
    DatasetSplit parts;
    parts.train.assign(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n_train));
    parts.val.assign(entries.begin() + static_cast<std::ptrdiff_t>(n_train),
                     entries.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    parts.test.assign(entries.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), entries.end());
    for (auto* p : {&parts.train, &parts.val, &parts.test}) std::sort(p->begin(), p->end());
    return parts;
}

void write_split(const std::filesystem::path& root, const DatasetSplit& parts) {
    write_manifest(root / "train.txt", parts.train);
    write_manifest(root / "val.txt", parts.val);
    write_manifest(root / "test.txt", parts.test);
}

} // namespace i2p
