#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "image2pci/annotation.hpp"
#include "image2pci/geometry.hpp"
#include "image2pci/image_io.hpp"
#include "image2pci/pci.hpp"

namespace i2p {

struct IntRange {
    int lo = 0;
    int hi = 0;
};

struct RealRange {
    double lo = 0.0;
    double hi = 0.0;
};

struct SynthConfig {
    int image_size_px = 96;
    std::array<double, 2> footprint_mm{1920.0, 1920.0};
    int n_images = 200;
    std::uint64_t seed = 1;
    IntRange crack_count{1, 3};
    IntRange blob_count{0, 1};
    RealRange crack_width_mm{6.0, 110.0};
    RealRange crack_length_mm{300.0, 1800.0};
    RealRange blob_radius_mm{150.0, 450.0};
    // Probability that an image carries no distress at all.
    double clean_fraction = 0.15;
    // Low, medium, high weights for pattern-blob severities.
    std::array<double, 3> pattern_severity_weights{0.3, 0.4, 0.3};
    int base_gray = 150;
    int speckle_amplitude = 18;

    // Throws ConfigError on any violated invariant.
    void validate() const;
    std::string to_json() const;
    static SynthConfig from_json(const std::string& text);

    // Mostly clean images; the label histogram peaks in the top bin.
    static SynthConfig right_skewed();
};

struct SynthSample {
    ImageAnnotation annotation;
    GrayImage image;
    Mask mask;  // union of the annotation polygons' rasterizations
};

// Sample `index` of the dataset; independent of every other index.
SynthSample generate_sample(const SynthConfig& config, std::size_t index, const SeverityThresholds& thresholds,
                            const DeductCurveSet& curves);

// Writes images/, annotations/, manifest.txt and config.json under `out_dir`.
// Returns the labeled annotations in manifest order.
std::vector<ImageAnnotation> generate(const SynthConfig& config, const std::filesystem::path& out_dir,
                                      const SeverityThresholds& thresholds, const DeductCurveSet& curves);

std::string synth_image_id(std::size_t index);

struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

// Seeded shuffle, then the first round(r_train * n) entries go to train and the
// next round(r_val * n) to val. Each part is returned sorted.
DatasetSplit split(std::vector<std::string> entries, const std::array<double, 3>& ratios, std::uint64_t seed);
// train.txt, val.txt and test.txt next to manifest.txt.
void write_split(const std::filesystem::path& root, const DatasetSplit& parts);

} // namespace i2p
