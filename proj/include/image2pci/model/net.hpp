#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "image2pci/image_io.hpp"
#include "image2pci/nn/ops.hpp"
#include "image2pci/nn/params.hpp"

namespace i2p::model {
inline namespace I2P_NN_ABI {

using nn::Real;
using nn::Tensor;

// Prior box size in input pixels.
struct Anchor {
    double w = 0.0;
    double h = 0.0;
};

// Anchors for the stride-8 and stride-16 grids of one detection head.
struct HeadAnchors {
    std::vector<Anchor> stride8;
    std::vector<Anchor> stride16;
};

inline constexpr std::array<int, 2> kDetectionStrides{8, 16};

struct NetConfig {
    int in_channels = 1;
    int base_width = 16;
    int input_h = 96;
    int input_w = 96;
    HeadAnchors linear_anchors{{{6, 24}, {24, 6}, {12, 12}}, {{12, 56}, {56, 12}, {24, 88}, {88, 24}}};
    HeadAnchors pattern_anchors{{{12, 12}, {20, 20}, {28, 28}}, {{36, 36}, {48, 48}, {64, 64}}};
    int n_linear_classes = 2;   // longitudinal, transverse
    int n_pattern_classes = 3;  // alligator, block, patch
    // Common pooled size of every PCI-head source and the hidden FC width.
    int pci_pool = 6;
    int pci_hidden = 64;

    // Throws ConfigError.
    void validate() const;
    std::string to_json() const;
    static NetConfig from_json(const std::string& text);
    friend bool operator==(const NetConfig&, const NetConfig&);
};

enum class Head { Linear, Pattern };

// Layout of one detection scale: channel a*(5+K)+j of the (N, A*(5+K), G, G)
// output holds, for anchor a, j = 0..3 box (tx, ty, tw, th), 4 objectness and
// 5.. class logits.
struct ScaleLayout {
    int stride = 0;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<Anchor> anchors;
    int n_classes = 0;
    int channels_per_anchor() const { return 5 + n_classes; }
};

std::vector<ScaleLayout> head_layout(const NetConfig& config, Head head);

struct ForwardOutputs {
    std::vector<Tensor> det_linear;   // stride 8, stride 16
    std::vector<Tensor> det_pattern;  // stride 8, stride 16
    Tensor seg_logits;                // (N, 2, H, W)
    Tensor pci;                       // (N), in [0, 100]
};

class Net {
public:
    // Kaiming-uniform convolution and FC weights, zero biases; deterministic in `seed`.
    Net(NetConfig config, std::uint64_t seed);

    const NetConfig& config() const noexcept { return config_; }
    nn::ParamStore& params() noexcept { return store_; }
    const nn::ParamStore& params() const noexcept { return store_; }

    // images: (N, in_channels, input_h, input_w). Eval mode uses the batchnorm
    // running statistics; training mode updates them.
    ForwardOutputs forward(const Tensor& images, bool training);

    // Checkpoint at `file` plus the NetConfig sidecar at `file` + ".json".
    void save(const std::filesystem::path& file) const;
    static Net load(const std::filesystem::path& file);

    Net(Net&&) noexcept;
    Net& operator=(Net&&) noexcept;
    ~Net();

private:
    struct Layers;
    NetConfig config_;
    nn::ParamStore store_;
    std::unique_ptr<Layers> layers_;
};

std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint);

// (p / 255 - 0.5) / 0.25 for every pixel; all images must share one size.
Tensor image_batch(const std::vector<const GrayImage*>& images);

struct Detection {
    std::array<double, 4> box_xyxy{};  // input pixels
    int class_id = 0;
    double score = 0.0;
    std::size_t grid_index = 0;  // flat (scale, anchor, y, x) position
};

// Decodes batch item `n` of one head: cx = (x + sigmoid(tx)) * stride,
// w = anchor_w * (2 sigmoid(tw))^2, score = sigmoid(obj) * sigmoid(cls).
// Candidates with score >= conf_threshold go through greedy per-class NMS.
// Output is ordered by score descending, then grid index.
std::vector<Detection> decode_detections(const std::vector<Tensor>& scales, const std::vector<ScaleLayout>& layout,
                                         std::size_t n, double conf_threshold, double nms_iou);

double box_iou_xyxy(const std::array<double, 4>& a, const std::array<double, 4>& b);
std::vector<Detection> nms(std::vector<Detection> candidates, double iou_threshold);

} // namespace I2P_NN_ABI
} // namespace i2p::model
