#include <cmath>
#include <limits>

#include "doctest.h"
#include "image2pci/errors.hpp"
#include "image2pci/model/loss.hpp"
#include "image2pci/synth.hpp"
#include "support.hpp"

using namespace i2p;
using namespace i2p::model;
using i2p::nn::Real;
using i2p::nn::Tensor;

namespace {

ImageAnnotation blank(int size = 96) {
    ImageAnnotation a;
    a.image_id = "img";
    a.width_px = a.height_px = size;
    a.footprint_mm = {1920, 1920};
    return a;
}

PolygonAnnotation rect(double x0, double y0, double x1, double y1, DistressType t,
                       std::optional<Severity> s = Severity::Medium) {
    return {{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}, t, s};
}

// Every output filled with `v`, shaped for `cfg` and a batch of n.
ForwardOutputs constant_outputs(const NetConfig& cfg, int n, Real v, Real pci) {
    ForwardOutputs out;
    for (Head h : {Head::Linear, Head::Pattern}) {
        for (const auto& L : head_layout(cfg, h)) {
            const int c = static_cast<int>(L.anchors.size()) * L.channels_per_anchor();
            (h == Head::Linear ? out.det_linear : out.det_pattern).push_back(Tensor::full({n, c, L.grid_h, L.grid_w}, v));
        }
    }
    out.seg_logits = Tensor::full({n, 2, cfg.input_h, cfg.input_w}, v);
    out.pci = Tensor::full({n}, pci);
    return out;
}

ForwardOutputs random_outputs(const NetConfig& cfg, int n, std::uint64_t seed) {
    ForwardOutputs out = constant_outputs(cfg, n, 0, 50);
    Rng rng(seed);
    auto fill = [&](Tensor& t) {
        for (auto& x : t.data()) x = static_cast<Real>(rng.uniform(-2, 2));
    };
    for (auto& t : out.det_linear) fill(t);
    for (auto& t : out.det_pattern) fill(t);
    fill(out.seg_logits);
    out.pci.data()[0] = static_cast<Real>(rng.uniform(0, 100));
    return out;
}

double bce(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

} // namespace

TEST_CASE("one longitudinal polygon routes to the linear head") {
    ImageAnnotation a = blank();
    a.annotations.push_back(rect(40, 10, 44, 60, DistressType::Longitudinal));
    a.pci_label = 71.5;
    const ImageTargets t = assign_targets(a, NetConfig{});
    REQUIRE(t.linear.size() == 1);
    CHECK(t.pattern.empty());
    const PositiveAnchor& p = t.linear[0];
    CHECK(p.class_id == 0);
    // 4 x 50 box: shape IoU 96/248 with (6, 24) beats 200/672 with (12, 56)
    CHECK(p.scale == 0);
    CHECK(p.anchor == 0);
    CHECK(p.gx == 5);
    CHECK(p.gy == 4);
    CHECK(p.box_cxcywh[0] == doctest::Approx(42.0 / 8));
    CHECK(p.box_cxcywh[1] == doctest::Approx(35.0 / 8));
    CHECK(p.box_cxcywh[2] == doctest::Approx(4.0 / 8));
    CHECK(p.box_cxcywh[3] == doctest::Approx(50.0 / 8));
    CHECK(t.seg == rasterize(a.annotations[0].vertices, 96, 96));
    CHECK(t.pci == 71.5);
}

TEST_CASE("empty image: no positives, background mask, pci 100") {
    const ImageTargets t = assign_targets(blank(), NetConfig{});
    CHECK(t.linear.empty());
    CHECK(t.pattern.empty());
    CHECK(t.seg.popcount() == 0);
    CHECK(t.pci == 100.0);
}

TEST_CASE("k boxes in disjoint cells give exactly k positives") {
    ImageAnnotation a = blank();
    a.annotations.push_back(rect(4, 4, 8, 30, DistressType::Longitudinal));
    a.annotations.push_back(rect(50, 10, 80, 14, DistressType::Transverse));
    a.annotations.push_back(rect(10, 60, 30, 80, DistressType::Alligator));
    a.annotations.push_back(rect(60, 60, 90, 90, DistressType::Patch));
    a.annotations.push_back(rect(40, 40, 44, 44, DistressType::Manhole, std::nullopt));
    a.pci_label = 40;
    const ImageTargets t = assign_targets(a, NetConfig{});
    CHECK(t.linear.size() == 2);
    CHECK(t.pattern.size() == 2);
    CHECK(t.linear[1].class_id == 1);
    CHECK(t.pattern[0].class_id == 0);
    CHECK(t.pattern[1].class_id == 2);
    // the manhole is neither detected nor segmented
    CHECK(t.seg.at(42, 42) == 0);
}

TEST_CASE("extra anchor matching adds positives of the same head only") {
    ImageAnnotation a = blank();
    a.annotations.push_back(rect(30, 30, 50, 50, DistressType::Block));
    a.pci_label = 60;
    const ImageTargets best = assign_targets(a, NetConfig{});
    const ImageTargets extra = assign_targets(a, NetConfig{}, 0.3);
    CHECK(best.pattern.size() == 1);
    CHECK(extra.pattern.size() > 1);
    CHECK(extra.linear.empty());
}

TEST_CASE("assign_targets errors") {
    ImageAnnotation a = blank();
    a.annotations.push_back(rect(4, 4, 8, 30, DistressType::Longitudinal, std::nullopt));
    a.pci_label = 90;
    try {
        assign_targets(a, NetConfig{});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(e.kind() == DataErrorKind::MissingSeverity);
        CHECK(e.annotation_index() == 0);
    }
    CHECK_THROWS_AS(assign_targets(blank(64), NetConfig{}), ConfigError);
}

TEST_CASE("no ground-truth box reaches both heads") {
    SynthConfig cfg;
    cfg.blob_count = {0, 2};
    const auto thresholds = SeverityThresholds::defaults();
    const auto curves = DeductCurveSet::load(test::source_dir() / "data" / "curves_d6433_approx.json");
    for (std::size_t i = 0; i < 40; ++i) {
        const SynthSample s = generate_sample(cfg, i, thresholds, curves);
        const ImageTargets t = assign_targets(s.annotation, NetConfig{});
        for (const auto& p : t.linear) {
            CHECK(is_linear(s.annotation.annotations[p.annotation_index].distress_type));
        }
        for (const auto& p : t.pattern) {
            CHECK(is_pattern(s.annotation.annotations[p.annotation_index].distress_type));
            for (const auto& q : t.linear) CHECK(q.annotation_index != p.annotation_index);
        }
        CHECK(t.seg == s.mask);
        CHECK(t.pci == *s.annotation.pci_label);
    }
}

TEST_CASE("detection loss matches a hand computation") {
    NetConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    const auto layout = head_layout(cfg, Head::Linear);
    std::vector<Tensor> outs;
    std::size_t total_obj = 0;
    for (const auto& L : layout) {
        outs.push_back(Tensor::full({1, static_cast<int>(L.anchors.size()) * 7, L.grid_h, L.grid_w}, -1.0f));
        total_obj += L.anchors.size() * static_cast<std::size_t>(L.grid_h * L.grid_w);
    }
    // positive: stride-8 grid, anchor 0 (6 x 24), cell gx 1, gy 2, class 1
    PositiveAnchor p{0, 0, 2, 1, 1, {1.5, 2.5, 0.75, 3.0}, 0};
    const std::size_t plane = 16, cell = 2 * 4 + 1;
    auto set = [&](int j, float v) { outs[0].data()[static_cast<std::size_t>(j) * plane + cell] = v; };
    set(0, 0.0f);
    set(1, 0.0f);
    set(2, 0.0f);
    set(3, 0.0f);
    set(4, 2.0f);
    set(5, -1.0f);
    set(6, 3.0f);
    const std::vector<PositiveAnchor> pos{p};
    LossWeights w;
    w.beta_cls = 0.5;
    w.beta_obj = 2.0;
    w.beta_box = 3.0;
    const double got = detection_loss(outs, layout, {&pos}, w).item();

    const double obj = ((total_obj - 1) * bce(-1, 0) + bce(2, 1)) / static_cast<double>(total_obj);
    const double cls = (bce(-1, 0) + bce(3, 1)) / 2;
    // predicted box (1.5, 2.5, 0.75, 3.0) equals the target: IoU 1
    const double box = 0.0;
    CHECK(got == doctest::Approx(0.5 * cls + 2.0 * obj + 3.0 * box).epsilon(1e-5));

    // shifting the prediction: tx -> sigmoid 0.75 moves cx by 0.25 grid units
    set(0, std::log(3.0f));
    const double got2 = detection_loss(outs, layout, {&pos}, w).item();
    const double inter = (0.75 - 0.25) * 3.0, uni = 2 * 0.75 * 3.0 - inter;
    CHECK(got2 == doctest::Approx(0.5 * cls + 2.0 * obj + 3.0 * (1 - inter / uni)).epsilon(1e-5));

    const std::vector<PositiveAnchor> none;
    CHECK(detection_loss(outs, layout, {&none}, w).item() ==
          doctest::Approx(2.0 * (total_obj * bce(-1, 0) + bce(2, 0) - bce(-1, 0)) / total_obj).epsilon(1e-5));
}

TEST_CASE("one-hot gamma selects a single term exactly") {
    NetConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    ImageAnnotation a = blank(32);
    a.annotations.push_back(rect(4, 4, 8, 20, DistressType::Longitudinal));
    a.annotations.push_back(rect(16, 16, 28, 28, DistressType::Alligator));
    a.pci_label = 55;
    const ImageTargets t = assign_targets(a, cfg);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const ForwardOutputs out = random_outputs(cfg, 1, seed);
        for (int k = 0; k < 4; ++k) {
            LossWeights w;
            w.gamma_det1 = k == 0;
            w.gamma_det2 = k == 1;
            w.gamma_seg = k == 2;
            w.gamma_pci = k == 3;
            const LossBreakdown b = total_loss(out, {&t}, cfg, w);
            const Real term[] = {b.l_det1, b.l_det2, b.l_seg, b.l_pci};
            CHECK(b.total.item() == term[k]);
        }
    }
}

TEST_CASE("total loss examples") {
    NetConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    ImageAnnotation a = blank(32);
    a.annotations.push_back(rect(8, 8, 24, 24, DistressType::Patch));
    a.pci_label = 90;
    const ImageTargets t = assign_targets(a, cfg);

    LossWeights pci_only{0, 0, 0, 1, 1, 1, 1};
    CHECK(total_loss(constant_outputs(cfg, 1, 0, 80), {&t}, cfg, pci_only).total.item() == 100);

    ForwardOutputs perfect = constant_outputs(cfg, 1, 0, 90);
    const std::size_t plane = 32 * 32;
    for (std::size_t i = 0; i < plane; ++i) {
        const Real s = t.seg.bits[i] ? Real(20) : Real(-20);
        perfect.seg_logits.data()[i] = -s;
        perfect.seg_logits.data()[plane + i] = s;
    }
    const LossBreakdown b = total_loss(perfect, {&t}, cfg, LossWeights{});
    CHECK(b.l_seg < 1e-3);
    CHECK(b.l_pci == 0);
    CHECK(b.total.item() == b.l_det1 + b.l_det2 + b.l_seg + b.l_pci);
}

TEST_CASE("total loss is linear in each gamma") {
    NetConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    ImageAnnotation a = blank(32);
    a.annotations.push_back(rect(2, 2, 6, 28, DistressType::Transverse));
    a.pci_label = 75;
    const ImageTargets t = assign_targets(a, cfg);
    const ForwardOutputs out = random_outputs(cfg, 1, 99);
    const LossBreakdown base = total_loss(out, {&t}, cfg, LossWeights{});
    const Real terms[] = {base.l_det1, base.l_det2, base.l_seg, base.l_pci};
    for (int k = 0; k < 4; ++k) {
        for (double g : {0.0, 1.0, 2.0}) {
            LossWeights w;
            double* slot[] = {&w.gamma_det1, &w.gamma_det2, &w.gamma_seg, &w.gamma_pci};
            *slot[k] = g;
            const double expected = static_cast<double>(base.total.item()) + (g - 1.0) * terms[k];
            CHECK(total_loss(out, {&t}, cfg, w).total.item() == doctest::Approx(expected).epsilon(1e-6));
        }
    }
}

TEST_CASE("non-finite terms abort with the term named") {
    NetConfig cfg;
    cfg.input_h = cfg.input_w = 32;
    const ImageTargets t = assign_targets(blank(32), cfg);
    ForwardOutputs out = constant_outputs(cfg, 1, 0, 50);
    out.seg_logits.data()[5] = std::numeric_limits<Real>::quiet_NaN();
    try {
        total_loss(out, {&t}, cfg, LossWeights{});
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.term() == "l_seg");
    }
    out = constant_outputs(cfg, 1, 0, std::numeric_limits<Real>::infinity());
    try {
        total_loss(out, {&t}, cfg, LossWeights{});
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.term() == "l_pci");
    }
    LossWeights bad;
    bad.beta_obj = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
