#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "image2pci/errors.hpp"

namespace i2p {

enum class DistressType { Alligator, Block, Longitudinal, Patch, Transverse, Manhole };
enum class Severity { Low, Medium, High };

inline constexpr std::array<DistressType, 6> kAllDistressTypes = {
    DistressType::Alligator, DistressType::Block,     DistressType::Longitudinal,
    DistressType::Patch,     DistressType::Transverse, DistressType::Manhole};
inline constexpr std::array<Severity, 3> kAllSeverities = {Severity::Low, Severity::Medium, Severity::High};

// Lower-case canonical label, e.g. "longitudinal".
std::string_view to_string(DistressType t);
std::string_view to_string(Severity s);
// Case-insensitive; nullopt for anything outside the closed enumeration.
std::optional<DistressType> parse_distress_type(std::string_view label);
std::optional<Severity> parse_severity(std::string_view label);

constexpr bool is_linear(DistressType t) {
    return t == DistressType::Longitudinal || t == DistressType::Transverse;
}
constexpr bool is_pattern(DistressType t) {
    return t == DistressType::Alligator || t == DistressType::Block || t == DistressType::Patch;
}

struct Point {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point&, const Point&) = default;
};

struct PolygonAnnotation {
    std::vector<Point> vertices;
    DistressType distress_type = DistressType::Longitudinal;
    // Required downstream for every non-Manhole distress; ingestion tolerates
    // its absence so that partially labeled datasets can still be counted.
    std::optional<Severity> severity;
    friend bool operator==(const PolygonAnnotation&, const PolygonAnnotation&) = default;
};

struct ImageAnnotation {
    std::string image_id;
    int width_px = 0;
    int height_px = 0;
    std::array<double, 2> footprint_mm{0.0, 0.0};  // (width_mm, height_mm)
    std::vector<PolygonAnnotation> annotations;
    std::optional<double> pci_label;
    friend bool operator==(const ImageAnnotation&, const ImageAnnotation&) = default;
};

struct HistogramBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    friend bool operator==(const HistogramBin&, const HistogramBin&) = default;
};

struct DatasetStats {
    std::map<DistressType, std::size_t> counts_by_type;
    std::map<Severity, std::size_t> counts_by_severity;
    std::vector<HistogramBin> pci_histogram;
    std::size_t total_annotations = 0;
};

// Checks every type invariant (vertex count, bounds, simplicity, footprint).
// Throws DataError naming the offending annotation.
void validate(const ImageAnnotation& image);

// Canonical JSON text for one image. parse_annotation(serialize_annotation(a)) == a,
// and canonical files survive parse -> serialize byte-for-byte.
std::string serialize_annotation(const ImageAnnotation& image);
ImageAnnotation parse_annotation(std::string_view json_text, const std::string& source_name = "<memory>");

ImageAnnotation load_annotation_file(const std::filesystem::path& file);
void save_annotation_file(const ImageAnnotation& image, const std::filesystem::path& file);

// Dataset layout: <root>/manifest.txt lists annotation files (relative paths, one
// per line); each image lives at <root>/images/<image_id>.png.
std::filesystem::path image_path(const std::filesystem::path& root, const std::string& image_id);
std::vector<std::string> read_manifest(const std::filesystem::path& manifest);
void write_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& entries);

// Loads a dataset sorted by image_id. Every type invariant is enforced.
std::vector<ImageAnnotation> parse_dataset(const std::filesystem::path& root);
std::vector<ImageAnnotation> parse_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest);

// Histogram bins partition [0, 100]; the last bin is closed on the right.
DatasetStats compute_stats(const std::vector<ImageAnnotation>& dataset, double bin_width);
std::vector<HistogramBin> histogram(const std::vector<double>& values, double bin_width);

} // namespace i2p
