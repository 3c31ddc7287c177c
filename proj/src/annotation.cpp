#include "image2pci/annotation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "image2pci/geometry.hpp"

namespace i2p {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(DataErrorKind kind) {
    switch (kind) {
    case DataErrorKind::MissingFile: return "MissingFile";
    case DataErrorKind::MalformedJson: return "MalformedJson";
    case DataErrorKind::UnknownDistressType: return "UnknownDistressType";
    case DataErrorKind::UnknownSeverity: return "UnknownSeverity";
    case DataErrorKind::InvalidPolygon: return "InvalidPolygon";
    case DataErrorKind::SelfIntersectingPolygon: return "SelfIntersectingPolygon";
    case DataErrorKind::OutOfBounds: return "OutOfBounds";
    case DataErrorKind::NonPositiveFootprint: return "NonPositiveFootprint";
    case DataErrorKind::DuplicateImageId: return "DuplicateImageId";
    case DataErrorKind::MissingSeverity: return "MissingSeverity";
    }
    return "Unknown";
}

namespace {

std::string describe(DataErrorKind kind, const std::string& image_id, std::size_t index, const std::string& detail) {
    std::string s = to_string(kind) + " at (" + image_id;
    if (index != DataError::npos) s += ", annotation " + std::to_string(index);
    s += "): " + detail;
    return s;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

} // namespace

DataError::DataError(DataErrorKind kind, std::string image_id, std::size_t annotation_index, const std::string& detail)
    : std::runtime_error(describe(kind, image_id, annotation_index, detail)),
      kind_(kind),
      image_id_(std::move(image_id)),
      index_(annotation_index) {}

std::string_view to_string(DistressType t) {
    switch (t) {
    case DistressType::Alligator: return "alligator";
    case DistressType::Block: return "block";
    case DistressType::Longitudinal: return "longitudinal";
    case DistressType::Patch: return "patch";
    case DistressType::Transverse: return "transverse";
    case DistressType::Manhole: return "manhole";
    }
    return "?";
}

std::string_view to_string(Severity s) {
    switch (s) {
    case Severity::Low: return "low";
    case Severity::Medium: return "medium";
    case Severity::High: return "high";
    }
    return "?";
}

std::optional<DistressType> parse_distress_type(std::string_view label) {
    const std::string l = lower(label);
    for (DistressType t : kAllDistressTypes) {
        if (l == to_string(t)) return t;
    }
    return std::nullopt;
}

std::optional<Severity> parse_severity(std::string_view label) {
    const std::string l = lower(label);
    for (Severity s : kAllSeverities) {
        if (l == to_string(s)) return s;
    }
    return std::nullopt;
}

void validate(const ImageAnnotation& image) {
    const std::string& id = image.image_id;
    if (id.empty()) throw DataError(DataErrorKind::MalformedJson, id, DataError::npos, "empty image_id");
    if (image.width_px <= 0 || image.height_px <= 0) {
        throw DataError(DataErrorKind::MalformedJson, id, DataError::npos, "image size must be positive");
    }
    if (!(image.footprint_mm[0] > 0.0) || !(image.footprint_mm[1] > 0.0) || !std::isfinite(image.footprint_mm[0]) ||
        !std::isfinite(image.footprint_mm[1])) {
        throw DataError(DataErrorKind::NonPositiveFootprint, id, DataError::npos, "footprint_mm must be positive");
    }
    if (image.pci_label && !(*image.pci_label >= 0.0 && *image.pci_label <= 100.0)) {
        throw DataError(DataErrorKind::MalformedJson, id, DataError::npos, "pci_label outside [0, 100]");
    }
    for (std::size_t i = 0; i < image.annotations.size(); ++i) {
        const auto& v = image.annotations[i].vertices;
        if (v.size() < 3) throw DataError(DataErrorKind::InvalidPolygon, id, i, "polygon needs at least 3 vertices");
        for (const Point& p : v) {
            if (!std::isfinite(p.x) || !std::isfinite(p.y) || p.x < 0.0 || p.y < 0.0 || p.x > image.width_px ||
                p.y > image.height_px) {
                throw DataError(DataErrorKind::OutOfBounds, id, i, "vertex outside image bounds");
            }
        }
        if (!is_simple(v)) throw DataError(DataErrorKind::SelfIntersectingPolygon, id, i, "polygon is not simple");
    }
}

std::string serialize_annotation(const ImageAnnotation& image) {
    ordered_json doc;
    doc["image_id"] = image.image_id;
    doc["width_px"] = image.width_px;
    doc["height_px"] = image.height_px;
    doc["footprint_mm"] = {image.footprint_mm[0], image.footprint_mm[1]};
    ordered_json anns = ordered_json::array();
    for (const auto& a : image.annotations) {
        ordered_json entry;
        entry["type"] = std::string(to_string(a.distress_type));
        entry["severity"] = a.severity ? ordered_json(std::string(to_string(*a.severity))) : ordered_json(nullptr);
        ordered_json verts = ordered_json::array();
        for (const Point& p : a.vertices) verts.push_back({p.x, p.y});
        entry["vertices"] = std::move(verts);
        anns.push_back(std::move(entry));
    }
    doc["annotations"] = std::move(anns);
    doc["pci_label"] = image.pci_label ? ordered_json(*image.pci_label) : ordered_json(nullptr);
    return doc.dump() + "\n";
}

ImageAnnotation parse_annotation(std::string_view text, const std::string& source_name) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(DataErrorKind::MalformedJson, source_name, DataError::npos, e.what());
    }
    auto malformed = [&](const std::string& id, std::size_t idx, const std::string& what) {
        return DataError(DataErrorKind::MalformedJson, id, idx, what);
    };
    if (!doc.is_object()) throw malformed(source_name, DataError::npos, "top level must be an object");
    if (!doc.contains("image_id") || !doc["image_id"].is_string()) {
        throw malformed(source_name, DataError::npos, "missing string field image_id");
    }
    ImageAnnotation img;
    img.image_id = doc["image_id"].get<std::string>();
    const std::string& id = img.image_id;
    for (const char* key : {"width_px", "height_px"}) {
        if (!doc.contains(key) || !doc[key].is_number_integer()) {
            throw malformed(id, DataError::npos, std::string("missing integer field ") + key);
        }
    }
    img.width_px = doc["width_px"].get<int>();
    img.height_px = doc["height_px"].get<int>();
    const json& fp = doc.value("footprint_mm", json());
    if (!fp.is_array() || fp.size() != 2 || !fp[0].is_number() || !fp[1].is_number()) {
        throw malformed(id, DataError::npos, "footprint_mm must be [width_mm, height_mm]");
    }
    img.footprint_mm = {fp[0].get<double>(), fp[1].get<double>()};

    const json& anns = doc.value("annotations", json::array());
    if (!anns.is_array()) throw malformed(id, DataError::npos, "annotations must be an array");
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const json& a = anns[i];
        if (!a.is_object()) throw malformed(id, i, "annotation must be an object");
        if (!a.contains("type") || !a["type"].is_string()) throw malformed(id, i, "missing string field type");
        const std::string label = a["type"].get<std::string>();
        auto type = parse_distress_type(label);
        if (!type) throw DataError(DataErrorKind::UnknownDistressType, id, i, "unknown distress label '" + label + "'");
        PolygonAnnotation poly;
        poly.distress_type = *type;
        if (a.contains("severity") && !a["severity"].is_null()) {
            if (!a["severity"].is_string()) throw malformed(id, i, "severity must be a string or null");
            const std::string sl = a["severity"].get<std::string>();
            auto sev = parse_severity(sl);
            if (!sev) throw DataError(DataErrorKind::UnknownSeverity, id, i, "unknown severity '" + sl + "'");
            poly.severity = *sev;
        }
        if (!a.contains("vertices") || !a["vertices"].is_array()) throw malformed(id, i, "missing vertices array");
        for (const json& v : a["vertices"]) {
            if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
                throw malformed(id, i, "vertex must be [x, y]");
            }
            poly.vertices.push_back({v[0].get<double>(), v[1].get<double>()});
        }
        img.annotations.push_back(std::move(poly));
    }
    if (doc.contains("pci_label") && !doc["pci_label"].is_null()) {
        if (!doc["pci_label"].is_number()) throw malformed(id, DataError::npos, "pci_label must be a number or null");
        img.pci_label = doc["pci_label"].get<double>();
    }
    validate(img);
    return img;
}

ImageAnnotation load_annotation_file(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError(DataErrorKind::MissingFile, file.string(), DataError::npos, "cannot open annotation file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_annotation(ss.str(), file.string());
}

void save_annotation_file(const ImageAnnotation& image, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << serialize_annotation(image);
}

std::filesystem::path image_path(const std::filesystem::path& root, const std::string& image_id) {
    return root / "images" / (image_id + ".png");
}

std::vector<std::string> read_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DataError(DataErrorKind::MissingFile, manifest.string(), DataError::npos, "cannot open manifest");
    std::vector<std::string> entries;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
        if (!line.empty()) entries.push_back(line);
    }
    return entries;
}

void write_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& entries) {
    std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + manifest.string());
    for (const auto& e : entries) out << e << '\n';
}

std::vector<ImageAnnotation> parse_dataset(const std::filesystem::path& root) {
    return parse_dataset(root, root / "manifest.txt");
}

std::vector<ImageAnnotation> parse_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest) {
    std::vector<ImageAnnotation> out;
    for (const std::string& rel : read_manifest(manifest)) {
        const auto file = root / rel;
        if (!std::filesystem::exists(file)) {
            throw DataError(DataErrorKind::MissingFile, rel, DataError::npos, "annotation file not found");
        }
        ImageAnnotation img = load_annotation_file(file);
        if (!std::filesystem::exists(image_path(root, img.image_id))) {
            throw DataError(DataErrorKind::MissingFile, img.image_id, DataError::npos,
                            "image file not found: " + image_path(root, img.image_id).string());
        }
        out.push_back(std::move(img));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    for (std::size_t i = 1; i < out.size(); ++i) {
        if (out[i].image_id == out[i - 1].image_id) {
            throw DataError(DataErrorKind::DuplicateImageId, out[i].image_id, DataError::npos, "duplicate image_id");
        }
    }
    return out;
}

std::vector<HistogramBin> histogram(const std::vector<double>& values, double bin_width) {
    if (!(bin_width > 0.0) || !std::isfinite(bin_width)) throw std::invalid_argument("bin_width must be positive");
    const double bins_real = 100.0 / bin_width;
    const auto nbins = static_cast<std::size_t>(std::llround(bins_real));
    if (nbins == 0 || std::abs(bins_real - static_cast<double>(nbins)) > 1e-9) {
        throw std::invalid_argument("bin_width must divide 100 evenly");
    }
    std::vector<HistogramBin> bins(nbins);
    for (std::size_t i = 0; i < nbins; ++i) {
        bins[i].lo = 100.0 * static_cast<double>(i) / static_cast<double>(nbins);
        bins[i].hi = 100.0 * static_cast<double>(i + 1) / static_cast<double>(nbins);
    }
    for (double v : values) {
        if (!(v >= 0.0 && v <= 100.0)) continue;
        auto idx = static_cast<std::size_t>(std::floor(v * static_cast<double>(nbins) / 100.0));
        idx = std::min(idx, nbins - 1);
        ++bins[idx].count;
    }
    return bins;
}

DatasetStats compute_stats(const std::vector<ImageAnnotation>& dataset, double bin_width) {
    DatasetStats stats;
    for (DistressType t : kAllDistressTypes) stats.counts_by_type[t] = 0;
    for (Severity s : kAllSeverities) stats.counts_by_severity[s] = 0;
    std::vector<double> labels;
    for (const auto& img : dataset) {
        for (const auto& a : img.annotations) {
            ++stats.counts_by_type[a.distress_type];
            if (a.severity) ++stats.counts_by_severity[*a.severity];
            ++stats.total_annotations;
        }
        if (img.pci_label) labels.push_back(*img.pci_label);
    }
    stats.pci_histogram = histogram(labels, bin_width);
    return stats;
}

} // namespace i2p
