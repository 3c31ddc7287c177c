#include "image2pci/model/loss.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "image2pci/errors.hpp"

namespace i2p::model {
inline namespace I2P_NN_ABI {

using namespace nn;

int linear_class(DistressType t) {
    if (t == DistressType::Longitudinal) return 0;
    if (t == DistressType::Transverse) return 1;
    throw std::invalid_argument("linear_class: not a linear distress");
}

int pattern_class(DistressType t) {
    switch (t) {
        case DistressType::Alligator: return 0;
        case DistressType::Block: return 1;
        case DistressType::Patch: return 2;
        default: throw std::invalid_argument("pattern_class: not a pattern distress");
    }
}

namespace {

double shape_iou(double w, double h, const Anchor& a) {
    const double inter = std::min(w, a.w) * std::min(h, a.h);
    return inter / (w * h + a.w * a.h - inter);
}

void place(std::vector<PositiveAnchor>& out, const std::vector<ScaleLayout>& layout, int scale, int anchor,
           const Box& box, int class_id, std::size_t index) {
    const ScaleLayout& L = layout[static_cast<std::size_t>(scale)];
    const double s = L.stride;
    const double cx = (box.x0 + box.x1) / 2, cy = (box.y0 + box.y1) / 2;
    const int gx = std::clamp(static_cast<int>(std::floor(cx / s)), 0, L.grid_w - 1);
    const int gy = std::clamp(static_cast<int>(std::floor(cy / s)), 0, L.grid_h - 1);
    for (const PositiveAnchor& p : out) {
        if (p.scale == scale && p.anchor == anchor && p.gx == gx && p.gy == gy) return;
    }
    out.push_back({scale, anchor, gy, gx, class_id, {cx / s, cy / s, box.width() / s, box.height() / s}, index});
}

} // namespace

ImageTargets assign_targets(const ImageAnnotation& image, const NetConfig& config, std::optional<double> extra_match_iou) {
    if (image.width_px != config.input_w || image.height_px != config.input_h) {
        throw ConfigError("image " + image.image_id + " is " + std::to_string(image.width_px) + "x" +
                          std::to_string(image.height_px) + " but the network expects " +
                          std::to_string(config.input_w) + "x" + std::to_string(config.input_h));
    }
    ImageTargets t;
    t.seg = Mask(image.width_px, image.height_px);
    bool any_distress = false;
    for (std::size_t i = 0; i < image.annotations.size(); ++i) {
        const PolygonAnnotation& poly = image.annotations[i];
        if (poly.distress_type == DistressType::Manhole) continue;
        if (!poly.severity) {
            throw DataError(DataErrorKind::MissingSeverity, image.image_id, i, "distress without severity");
        }
        any_distress = true;
        rasterize_into(t.seg, poly.vertices);

        const bool lin = is_linear(poly.distress_type);
        const Head head = lin ? Head::Linear : Head::Pattern;
        const auto layout = head_layout(config, head);
        const Box box = bounding_box(poly.vertices);
        const double w = std::max(box.width(), 1e-6), h = std::max(box.height(), 1e-6);
        const int cls = lin ? linear_class(poly.distress_type) : pattern_class(poly.distress_type);
        auto& dst = lin ? t.linear : t.pattern;

        int best_scale = 0, best_anchor = 0;
        double best = -1.0;
        for (int s = 0; s < static_cast<int>(layout.size()); ++s) {
            const auto& anchors = layout[static_cast<std::size_t>(s)].anchors;
            for (int a = 0; a < static_cast<int>(anchors.size()); ++a) {
                const double iou = shape_iou(w, h, anchors[static_cast<std::size_t>(a)]);
                if (iou > best) {
                    best = iou;
                    best_scale = s;
                    best_anchor = a;
                }
            }
        }
        place(dst, layout, best_scale, best_anchor, box, cls, i);
        if (extra_match_iou) {
            for (int s = 0; s < static_cast<int>(layout.size()); ++s) {
                const auto& anchors = layout[static_cast<std::size_t>(s)].anchors;
                for (int a = 0; a < static_cast<int>(anchors.size()); ++a) {
                    if (s == best_scale && a == best_anchor) continue;
                    if (shape_iou(w, h, anchors[static_cast<std::size_t>(a)]) >= *extra_match_iou) {
                        place(dst, layout, s, a, box, cls, i);
                    }
                }
            }
        }
    }
    if (image.pci_label) {
        t.pci = *image.pci_label;
    } else if (any_distress) {
        throw ConfigError("image " + image.image_id + " has distress but no pci label");
    }
    return t;
}

void LossWeights::validate() const {
    for (double v : {gamma_det1, gamma_det2, gamma_seg, gamma_pci, beta_cls, beta_obj, beta_box}) {
        if (!std::isfinite(v) || v < 0) throw ConfigError("loss weights must be finite and non-negative");
    }
}

NonFiniteLoss::NonFiniteLoss(std::string term, double value)
    : std::runtime_error("non-finite loss term " + term + " = " + std::to_string(value)), term_(std::move(term)) {}

Tensor detection_loss(const std::vector<Tensor>& outputs, const std::vector<ScaleLayout>& layout,
                      const std::vector<const std::vector<PositiveAnchor>*>& positives, const LossWeights& w) {
    if (outputs.size() != layout.size()) throw ShapeError("detection_loss: scale count mismatch");
    const std::size_t N = positives.size();
    std::vector<Tensor> obj_logits;
    std::vector<Real> obj_target;
    std::vector<Tensor> tx, ty, tw, th, cls;
    std::vector<Real> gx_off, gy_off, aw, ah, cls_target, box_target;

    for (std::size_t s = 0; s < outputs.size(); ++s) {
        const ScaleLayout& L = layout[s];
        const Tensor& out = outputs[s];
        const int A = static_cast<int>(L.anchors.size()), per = L.channels_per_anchor();
        const Shape expected{static_cast<int>(N), A * per, L.grid_h, L.grid_w};
        if (out.shape() != expected) {
            throw ShapeError("detection_loss: output " + shape_str(out.shape()) + " expected " + shape_str(expected));
        }
        const std::size_t plane = static_cast<std::size_t>(L.grid_h) * L.grid_w;
        auto flat = [&](std::size_t n, int a, int j, std::size_t cell) {
            return ((n * static_cast<std::size_t>(A * per)) + static_cast<std::size_t>(a * per + j)) * plane + cell;
        };
        const Tensor v = reshape(out, {static_cast<int>(out.numel())});

        std::vector<std::size_t> obj_idx;
        const std::size_t base = obj_target.size();
        for (std::size_t n = 0; n < N; ++n)
            for (int a = 0; a < A; ++a)
                for (std::size_t cell = 0; cell < plane; ++cell) obj_idx.push_back(flat(n, a, 4, cell));
        obj_target.resize(base + obj_idx.size(), Real(0));
        obj_logits.push_back(gather(v, obj_idx));

        std::vector<std::size_t> ix, iy, iw, ih, ic;
        for (std::size_t n = 0; n < N; ++n) {
            for (const PositiveAnchor& p : *positives[n]) {
                if (p.scale != static_cast<int>(s)) continue;
                const std::size_t cell = static_cast<std::size_t>(p.gy) * L.grid_w + p.gx;
                obj_target[base + (n * A + p.anchor) * plane + cell] = Real(1);
                ix.push_back(flat(n, p.anchor, 0, cell));
                iy.push_back(flat(n, p.anchor, 1, cell));
                iw.push_back(flat(n, p.anchor, 2, cell));
                ih.push_back(flat(n, p.anchor, 3, cell));
                for (int k = 0; k < L.n_classes; ++k) {
                    ic.push_back(flat(n, p.anchor, 5 + k, cell));
                    cls_target.push_back(k == p.class_id ? Real(1) : Real(0));
                }
                gx_off.push_back(static_cast<Real>(p.gx));
                gy_off.push_back(static_cast<Real>(p.gy));
                const Anchor& an = L.anchors[static_cast<std::size_t>(p.anchor)];
                aw.push_back(static_cast<Real>(an.w / L.stride));
                ah.push_back(static_cast<Real>(an.h / L.stride));
                for (double b : p.box_cxcywh) box_target.push_back(static_cast<Real>(b));
            }
        }
        if (!ix.empty()) {
            tx.push_back(gather(v, ix));
            ty.push_back(gather(v, iy));
            tw.push_back(gather(v, iw));
            th.push_back(gather(v, ih));
            cls.push_back(gather(v, ic));
        }
    }

    const Tensor obj = obj_logits.size() == 1 ? obj_logits[0] : concat(obj_logits, 0);
    const Tensor l_obj = bce_with_logits(obj, Tensor::from({static_cast<int>(obj_target.size())}, obj_target));
    Tensor loss = scale(l_obj, static_cast<Real>(w.beta_obj));
    if (tx.empty()) return loss;

    auto joined = [](const std::vector<Tensor>& parts) { return parts.size() == 1 ? parts[0] : concat(parts, 0); };
    const int P = static_cast<int>(gx_off.size());
    const Tensor l_cls = bce_with_logits(joined(cls), Tensor::from({static_cast<int>(cls_target.size())}, cls_target));

    auto column = [P](const Tensor& t) { return reshape(t, {P, 1}); };
    auto size_of = [&](const std::vector<Tensor>& raw, const std::vector<Real>& anchor) {
        const Tensor u = scale(sigmoid(joined(raw)), Real(2));
        return mul(mul(u, u), Tensor::from({P}, anchor));
    };
    const Tensor cx = add(sigmoid(joined(tx)), Tensor::from({P}, gx_off));
    const Tensor cy = add(sigmoid(joined(ty)), Tensor::from({P}, gy_off));
    const Tensor pred = concat({column(cx), column(cy), column(size_of(tw, aw)), column(size_of(th, ah))}, 1);
    const Tensor l_box = iou_loss(pred, Tensor::from({P, 4}, box_target));

    loss = add(loss, scale(l_cls, static_cast<Real>(w.beta_cls)));
    return add(loss, scale(l_box, static_cast<Real>(w.beta_box)));
}

LossBreakdown total_loss(const ForwardOutputs& outputs, const std::vector<const ImageTargets*>& targets,
                         const NetConfig& config, const LossWeights& w) {
    w.validate();
    const std::size_t N = targets.size();
    if (outputs.seg_logits.rank() != 4 || static_cast<std::size_t>(outputs.seg_logits.dim(0)) != N ||
        outputs.pci.numel() != N) {
        throw ShapeError("total_loss: outputs for " + shape_str(outputs.seg_logits.shape()) + " vs " +
                         std::to_string(N) + " targets");
    }
    std::vector<const std::vector<PositiveAnchor>*> lin, pat;
    std::vector<std::int32_t> labels;
    std::vector<Real> pci;
    const std::size_t pixels = static_cast<std::size_t>(outputs.seg_logits.dim(2)) * outputs.seg_logits.dim(3);
    for (const ImageTargets* t : targets) {
        lin.push_back(&t->linear);
        pat.push_back(&t->pattern);
        if (t->seg.bits.size() != pixels) throw ShapeError("total_loss: mask size differs from segmentation output");
        labels.insert(labels.end(), t->seg.bits.begin(), t->seg.bits.end());
        pci.push_back(static_cast<Real>(t->pci));
    }

    LossBreakdown out;
    const Tensor l_det1 = detection_loss(outputs.det_linear, head_layout(config, Head::Linear), lin, w);
    const Tensor l_det2 = detection_loss(outputs.det_pattern, head_layout(config, Head::Pattern), pat, w);
    const Tensor l_seg = softmax_cross_entropy(outputs.seg_logits, labels);
    const Tensor l_pci = mse(outputs.pci, Tensor::from({static_cast<int>(N)}, pci));

    const std::array<std::pair<const char*, const Tensor*>, 4> terms{
        {{"l_det1", &l_det1}, {"l_det2", &l_det2}, {"l_seg", &l_seg}, {"l_pci", &l_pci}}};
    for (const auto& [name, term] : terms) {
        const double v = term->item();
        if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
    }
    out.l_det1 = l_det1.item();
    out.l_det2 = l_det2.item();
    out.l_seg = l_seg.item();
    out.l_pci = l_pci.item();
    out.total = add(add(add(scale(l_det1, static_cast<Real>(w.gamma_det1)), scale(l_det2, static_cast<Real>(w.gamma_det2))),
                        scale(l_seg, static_cast<Real>(w.gamma_seg))),
                    scale(l_pci, static_cast<Real>(w.gamma_pci)));
    if (!std::isfinite(out.total.item())) throw NonFiniteLoss("total", out.total.item());
    return out;
}

} // namespace I2P_NN_ABI
} // namespace i2p::model
