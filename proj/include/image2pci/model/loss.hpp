#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "image2pci/annotation.hpp"
#include "image2pci/geometry.hpp"
#include "image2pci/model/net.hpp"

namespace i2p::model {
inline namespace I2P_NN_ABI {

// One anchor made responsible for a ground-truth box.
struct PositiveAnchor {
    int scale = 0;  // index into head_layout
    int anchor = 0;
    int gy = 0;
    int gx = 0;
    int class_id = 0;
    std::array<double, 4> box_cxcywh{};  // grid units of the assigned scale
    std::size_t annotation_index = 0;
};

struct ImageTargets {
    std::vector<PositiveAnchor> linear;
    std::vector<PositiveAnchor> pattern;
    Mask seg;  // union of the distress polygons
    double pci = 100.0;
};

int linear_class(DistressType t);   // longitudinal 0, transverse 1
int pattern_class(DistressType t);  // alligator 0, block 1, patch 2

// Routes each box to the head of its distress family and to the anchor with the
// best centred shape IoU over both scales; the responsible cell is the one
// holding the box centre. With `extra_match_iou`, every other anchor of the same
// head whose shape IoU reaches it also becomes positive at its own scale. A cell
// and anchor already taken keeps its first box. Manhole annotations are ignored.
// Throws DataError(MissingSeverity) for a distress without severity.
ImageTargets assign_targets(const ImageAnnotation& image, const NetConfig& config,
                            std::optional<double> extra_match_iou = std::nullopt);

struct LossWeights {
    double gamma_det1 = 1.0;  // linear head
    double gamma_det2 = 1.0;  // pattern head
    double gamma_seg = 1.0;
    double gamma_pci = 1.0;
    double beta_cls = 1.0;
    double beta_obj = 1.0;
    double beta_box = 1.0;

    // Throws ConfigError unless every weight is finite and non-negative.
    void validate() const;
};

struct LossBreakdown {
    Tensor total;
    Real l_det1 = 0;
    Real l_det2 = 0;
    Real l_seg = 0;
    Real l_pci = 0;
};

class NonFiniteLoss : public std::runtime_error {
public:
    NonFiniteLoss(std::string term, double value);
    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

// Detection term of one head: beta_cls * class BCE (mean over positives and
// classes) + beta_obj * objectness BCE (mean over every anchor of both scales)
// + beta_box * mean (1 - IoU) over positives. Class and box terms are zero
// without positives.
Tensor detection_loss(const std::vector<Tensor>& outputs, const std::vector<ScaleLayout>& layout,
                      const std::vector<const std::vector<PositiveAnchor>*>& positives, const LossWeights& w);

// gamma_det1 L_det1 + gamma_det2 L_det2 + gamma_seg L_seg + gamma_pci L_pci with
// L_seg the mean per-pixel 2-class cross entropy and L_pci the MSE on [0, 100].
// Throws NonFiniteLoss naming the first non-finite term.
LossBreakdown total_loss(const ForwardOutputs& outputs, const std::vector<const ImageTargets*>& targets,
                         const NetConfig& config, const LossWeights& w);

} // namespace I2P_NN_ABI
} // namespace i2p::model
