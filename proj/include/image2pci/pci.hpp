#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "image2pci/annotation.hpp"

namespace i2p {

struct DistressRecord {
    DistressType distress_type = DistressType::Longitudinal;
    Severity severity = Severity::Low;
    double extent = 0.0;  // metres for linear types, square metres for pattern types
};

struct CurvePoint {
    double x = 0.0;
    double y = 0.0;
};
using Curve = std::vector<CurvePoint>;

// Piecewise-linear in log10(x), clamped to the end values outside the span.
double interpolate_log10(const Curve& curve, double x);
// Piecewise-linear in x, clamped to the end values outside the span.
double interpolate_linear(const Curve& curve, double x);

// Deduct curves keyed by (type, severity) over density percent, and correction
// curves keyed by q over total deduct value. Validated on construction.
class DeductCurveSet {
public:
    using DeductKey = std::pair<DistressType, Severity>;

    DeductCurveSet() = default;
    DeductCurveSet(std::map<DeductKey, Curve> deduct, std::map<int, Curve> correction, std::string provenance);

    static DeductCurveSet from_json(const std::string& text);
    static DeductCurveSet load(const std::filesystem::path& file);
    std::string to_json() const;

    const Curve& deduct_curve(DistressType type, Severity severity) const;
    // Exact q if present; q above the largest configured key uses the largest curve.
    const Curve& correction_curve(int q) const;

    const std::map<DeductKey, Curve>& deduct_curves() const noexcept { return deduct_; }
    const std::map<int, Curve>& correction_curves() const noexcept { return correction_; }
    const std::string& provenance() const noexcept { return provenance_; }

private:
    std::map<DeductKey, Curve> deduct_;
    std::map<int, Curve> correction_;
    std::string provenance_;
};

struct CdvIteration {
    int q = 0;
    double tdv = 0.0;
    double cdv = 0.0;
    std::vector<double> deducts;  // the deduct list this iteration summed
};

struct PciReport {
    std::vector<double> densities;  // per record, percent
    std::vector<double> deducts;    // per record
    double allowed_deducts = 0.0;   // m; 0 when the iteration was not needed
    std::vector<CdvIteration> iterations;
    double max_cdv = 0.0;
    double pci = 100.0;
    std::string rating;
};

double density(const DistressRecord& record, double sample_area_m2);
double deduct_value(const DeductCurveSet& curves, DistressType type, Severity severity, double density_pct);

// Deduct values at or below this level are treated as negligible.
inline constexpr double kNegligibleDeduct = 2.0;
// m = 1 + (9/98)(100 - HDV), capped at 10.
double allowable_deducts(double highest_deduct);

PciReport compute_pci(std::span<const DistressRecord> records, double sample_area_m2, const DeductCurveSet& curves);

std::string pci_rating(double pci);

// Image -> distress records: pattern extent is polygon area, linear extent is the
// polygon's longest-axis length, both converted through the image footprint.
// Manhole annotations contribute no record.
std::vector<DistressRecord> distress_records(const ImageAnnotation& image);
double sample_area_m2(const ImageAnnotation& image);
PciReport image_pci(const ImageAnnotation& image, const DeductCurveSet& curves);

std::vector<ImageAnnotation> label_dataset(std::vector<ImageAnnotation> dataset, const DeductCurveSet& curves);

} // namespace i2p
