#include "image2pci/model/net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "image2pci/errors.hpp"
#include "image2pci/rng.hpp"

namespace i2p::model {
inline namespace I2P_NN_ABI {

using namespace nn;
using nlohmann::ordered_json;

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("net config: " + what);
}

void validate_anchors(const std::vector<Anchor>& anchors, const std::string& name) {
    require(!anchors.empty(), name + " needs at least one anchor");
    for (const Anchor& a : anchors) {
        require(std::isfinite(a.w) && std::isfinite(a.h) && a.w > 0 && a.h > 0, name + " anchors must be positive");
    }
}

ordered_json anchors_json(const std::vector<Anchor>& anchors) {
    ordered_json out = ordered_json::array();
    for (const Anchor& a : anchors) out.push_back({a.w, a.h});
    return out;
}

std::vector<Anchor> anchors_from(const nlohmann::json& j) {
    std::vector<Anchor> out;
    for (const auto& a : j) {
        if (!a.is_array() || a.size() != 2) throw ConfigError("net config: anchor must be [w, h]");
        out.push_back({a[0].get<double>(), a[1].get<double>()});
    }
    return out;
}

// Builds layers in a fixed order so that parameter names and initial values
// depend only on the config and seed.
class Builder {
public:
    Builder(ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

    Tensor uniform(const std::string& name, Shape shape, double bound) {
        Tensor t = store_.add_parameter(name, std::move(shape));
        for (Real& v : t.data()) v = static_cast<Real>(rng_.uniform(-bound, bound));
        return t;
    }
    Tensor kaiming(const std::string& name, Shape shape, int fan_in) {
        return uniform(name, std::move(shape), std::sqrt(6.0 / fan_in));
    }
    Tensor zeros(const std::string& name, Shape shape) { return store_.add_parameter(name, std::move(shape)); }
    Tensor ones(const std::string& name, Shape shape) {
        Tensor t = store_.add_parameter(name, std::move(shape));
        std::fill(t.data().begin(), t.data().end(), Real(1));
        return t;
    }
    Tensor buffer(const std::string& name, Shape shape, Real fill) { return store_.add_buffer(name, std::move(shape), fill); }

private:
    ParamStore& store_;
    Rng rng_;
};

// conv (no bias) -> batchnorm -> SiLU
struct ConvBnAct {
    Tensor weight, gamma, beta;
    BatchNormState bn;
    int stride = 1, pad = 0;

    ConvBnAct() = default;
    ConvBnAct(Builder& b, const std::string& name, int in, int out, int k, int s) : stride(s), pad(k / 2) {
        weight = b.kaiming(name + ".conv.weight", {out, in, k, k}, in * k * k);
        gamma = b.ones(name + ".bn.weight", {out});
        beta = b.zeros(name + ".bn.bias", {out});
        bn.running_mean = b.buffer(name + ".bn.running_mean", {out}, 0);
        bn.running_var = b.buffer(name + ".bn.running_var", {out}, 1);
    }
    Tensor operator()(const Tensor& x, bool training) {
        return silu(batchnorm2d(conv2d(x, weight, Tensor(), stride, pad), gamma, beta, bn, training));
    }
};

struct Conv {
    Tensor weight, bias;
    int stride = 1, pad = 0;

    Conv() = default;
    Conv(Builder& b, const std::string& name, int in, int out, int k) : pad(k / 2) {
        weight = b.kaiming(name + ".weight", {out, in, k, k}, in * k * k);
        bias = b.zeros(name + ".bias", {out});
    }
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct Dense {
    Tensor weight, bias;

    Dense() = default;
    Dense(Builder& b, const std::string& name, int in, int out) {
        weight = b.kaiming(name + ".weight", {out, in}, in);
        bias = b.zeros(name + ".bias", {out});
    }
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

// Split into two 1x1 branches, a residual bottleneck on one, concat, 1x1 merge.
struct CspBlock {
    ConvBnAct cv1, cv2, b1, b2, cv3;

    CspBlock() = default;
    CspBlock(Builder& b, const std::string& name, int in, int out) {
        const int h = std::max(1, out / 2);
        cv1 = ConvBnAct(b, name + ".cv1", in, h, 1, 1);
        cv2 = ConvBnAct(b, name + ".cv2", in, h, 1, 1);
        b1 = ConvBnAct(b, name + ".m.cv1", h, h, 1, 1);
        b2 = ConvBnAct(b, name + ".m.cv2", h, h, 3, 1);
        cv3 = ConvBnAct(b, name + ".cv3", 2 * h, out, 1, 1);
    }
    Tensor operator()(const Tensor& x, bool training) {
        Tensor a = cv1(x, training);
        a = add(a, b2(b1(a, training), training));
        return cv3(concat({a, cv2(x, training)}, 1), training);
    }
};

struct Spp {
    ConvBnAct cv1, cv2;

    Spp() = default;
    Spp(Builder& b, const std::string& name, int in, int out) {
        const int h = std::max(1, in / 2);
        cv1 = ConvBnAct(b, name + ".cv1", in, h, 1, 1);
        cv2 = ConvBnAct(b, name + ".cv2", 4 * h, out, 1, 1);
    }
    Tensor operator()(const Tensor& x, bool training) {
        Tensor y = cv1(x, training);
        std::vector<Tensor> parts{y};
        for (int k : {5, 9, 13}) parts.push_back(max_pool2d(y, k, 1, k / 2));
        return cv2(concat(parts, 1), training);
    }
};

struct DetScale {
    ConvBnAct penult;
    Conv out;
};

} // namespace

struct Net::Layers {
    ConvBnAct stem, down1, down2, down3;
    CspBlock csp1, csp2, csp3;
    Spp spp;
    ConvBnAct lateral, pan_down;
    CspBlock fpn_csp, pan_csp;
    std::array<DetScale, 2> linear, pattern;
    CspBlock seg_csp1, seg_csp2;
    Conv seg_out;
    Conv align_linear, align_pattern;
    Dense fc1, fc2;
};

void NetConfig::validate() const {
    require(in_channels >= 1, "in_channels must be >= 1");
    require(base_width >= 2 && base_width % 2 == 0, "base_width must be an even number >= 2");
    require(input_h > 0 && input_w > 0 && input_h % 16 == 0 && input_w % 16 == 0,
            "input size must be a positive multiple of 16");
    validate_anchors(linear_anchors.stride8, "linear stride-8");
    validate_anchors(linear_anchors.stride16, "linear stride-16");
    validate_anchors(pattern_anchors.stride8, "pattern stride-8");
    validate_anchors(pattern_anchors.stride16, "pattern stride-16");
    require(n_linear_classes == 2, "n_linear_classes must be 2");
    require(n_pattern_classes == 3, "n_pattern_classes must be 3");
    require(pci_pool >= 1, "pci_pool must be >= 1");
    require(pci_hidden >= 1, "pci_hidden must be >= 1");
}

std::string NetConfig::to_json() const {
    ordered_json j;
    j["in_channels"] = in_channels;
    j["base_width"] = base_width;
    j["input_hw"] = {input_h, input_w};
    j["linear_anchors"] = {{"stride8", anchors_json(linear_anchors.stride8)},
                           {"stride16", anchors_json(linear_anchors.stride16)}};
    j["pattern_anchors"] = {{"stride8", anchors_json(pattern_anchors.stride8)},
                            {"stride16", anchors_json(pattern_anchors.stride16)}};
    j["n_linear_classes"] = n_linear_classes;
    j["n_pattern_classes"] = n_pattern_classes;
    j["pci_pool"] = pci_pool;
    j["pci_hidden"] = pci_hidden;
    return j.dump(2) + "\n";
}

NetConfig NetConfig::from_json(const std::string& text) {
    NetConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        for (const auto& [key, value] : j.items()) {
            if (key == "in_channels") c.in_channels = value.get<int>();
            else if (key == "base_width") c.base_width = value.get<int>();
            else if (key == "input_hw") {
                if (!value.is_array() || value.size() != 2) throw ConfigError("net config: input_hw must be [h, w]");
                c.input_h = value[0].get<int>();
                c.input_w = value[1].get<int>();
            } else if (key == "linear_anchors") {
                c.linear_anchors = {anchors_from(value.at("stride8")), anchors_from(value.at("stride16"))};
            } else if (key == "pattern_anchors") {
                c.pattern_anchors = {anchors_from(value.at("stride8")), anchors_from(value.at("stride16"))};
            } else if (key == "n_linear_classes") c.n_linear_classes = value.get<int>();
            else if (key == "n_pattern_classes") c.n_pattern_classes = value.get<int>();
            else if (key == "pci_pool") c.pci_pool = value.get<int>();
            else if (key == "pci_hidden") c.pci_hidden = value.get<int>();
            else throw ConfigError("net config: unknown field " + key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("net config: ") + e.what());
    }
    c.validate();
    return c;
}

bool operator==(const NetConfig& a, const NetConfig& b) { return a.to_json() == b.to_json(); }

std::vector<ScaleLayout> head_layout(const NetConfig& config, Head head) {
    const HeadAnchors& anchors = head == Head::Linear ? config.linear_anchors : config.pattern_anchors;
    const int k = head == Head::Linear ? config.n_linear_classes : config.n_pattern_classes;
    std::vector<ScaleLayout> out;
    for (int i = 0; i < 2; ++i) {
        const int s = kDetectionStrides[static_cast<std::size_t>(i)];
        out.push_back({s, config.input_h / s, config.input_w / s, i == 0 ? anchors.stride8 : anchors.stride16, k});
    }
    return out;
}

Net::Net(NetConfig config, std::uint64_t seed) : config_(std::move(config)), layers_(std::make_unique<Layers>()) {
    config_.validate();
    Builder b(store_, seed);
    Layers& L = *layers_;
    const int c = config_.base_width;
    L.stem = ConvBnAct(b, "encoder.stem", config_.in_channels, c, 3, 2);
    L.down1 = ConvBnAct(b, "encoder.down1", c, 2 * c, 3, 2);
    L.csp1 = CspBlock(b, "encoder.csp1", 2 * c, 2 * c);
    L.down2 = ConvBnAct(b, "encoder.down2", 2 * c, 4 * c, 3, 2);
    L.csp2 = CspBlock(b, "encoder.csp2", 4 * c, 4 * c);
    L.down3 = ConvBnAct(b, "encoder.down3", 4 * c, 8 * c, 3, 2);
    L.csp3 = CspBlock(b, "encoder.csp3", 8 * c, 8 * c);

    L.spp = Spp(b, "neck.spp", 8 * c, 8 * c);
    L.lateral = ConvBnAct(b, "neck.lateral", 8 * c, 4 * c, 1, 1);
    L.fpn_csp = CspBlock(b, "neck.fpn", 8 * c, 4 * c);
    L.pan_down = ConvBnAct(b, "neck.pan_down", 4 * c, 4 * c, 3, 2);
    L.pan_csp = CspBlock(b, "neck.pan", 8 * c, 8 * c);

    const std::array<int, 2> neck_channels{4 * c, 8 * c};
    for (Head head : {Head::Linear, Head::Pattern}) {
        const std::string prefix = head == Head::Linear ? "linear" : "pattern";
        auto& scales = head == Head::Linear ? L.linear : L.pattern;
        const auto layout = head_layout(config_, head);
        for (std::size_t i = 0; i < 2; ++i) {
            const std::string name = prefix + ".s" + std::to_string(layout[i].stride);
            const int outc = static_cast<int>(layout[i].anchors.size()) * layout[i].channels_per_anchor();
            scales[i].penult = ConvBnAct(b, name + ".penult", neck_channels[i], 2 * c, 3, 1);
            scales[i].out = Conv(b, name + ".out", 2 * c, outc, 1);
        }
    }

    L.seg_csp1 = CspBlock(b, "seg.csp1", 4 * c, 2 * c);
    L.seg_csp2 = CspBlock(b, "seg.csp2", 2 * c, c);
    L.seg_out = Conv(b, "seg.out", c, 2, 3);

    const int p = config_.pci_pool;
    L.align_linear = Conv(b, "pci.align_linear", 2 * c, 2, 1);
    L.align_pattern = Conv(b, "pci.align_pattern", 2 * c, 2, 1);
    L.fc1 = Dense(b, "pci.fc1", 3 * 2 * p * p, config_.pci_hidden);
    // Output layer at 1% of the Kaiming bound: every image starts near PCI 50,
    // away from the sigmoid tails.
    L.fc2.weight = b.uniform("pci.fc2.weight", {1, config_.pci_hidden}, 0.01 * std::sqrt(6.0 / config_.pci_hidden));
    L.fc2.bias = b.zeros("pci.fc2.bias", {1});
}

Net::Net(Net&&) noexcept = default;
Net& Net::operator=(Net&&) noexcept = default;
Net::~Net() = default;

ForwardOutputs Net::forward(const Tensor& images, bool training) {
    const Shape expected{images.rank() == 4 ? images.dim(0) : 0, config_.in_channels, config_.input_h, config_.input_w};
    if (images.rank() != 4 || images.dim(0) < 1 || images.shape() != expected) {
        throw ShapeError("net: input " + shape_str(images.shape()) + " does not match (N, " +
                         std::to_string(config_.in_channels) + ", " + std::to_string(config_.input_h) + ", " +
                         std::to_string(config_.input_w) + ")");
    }
    Layers& L = *layers_;
    const bool t = training;

    Tensor x = L.stem(images, t);
    x = L.csp1(L.down1(x, t), t);
    const Tensor p8 = L.csp2(L.down2(x, t), t);
    const Tensor p16 = L.csp3(L.down3(p8, t), t);

    const Tensor lat = L.lateral(L.spp(p16, t), t);
    const Tensor f8 = L.fpn_csp(concat({upsample_nearest2x(lat), p8}, 1), t);
    const Tensor f16 = L.pan_csp(concat({L.pan_down(f8, t), lat}, 1), t);
    const std::array<Tensor, 2> neck{f8, f16};

    ForwardOutputs out;
    std::array<Tensor, 2> penult16;
    for (int h = 0; h < 2; ++h) {
        auto& scales = h == 0 ? L.linear : L.pattern;
        auto& dst = h == 0 ? out.det_linear : out.det_pattern;
        for (std::size_t i = 0; i < 2; ++i) {
            const Tensor f = scales[i].penult(neck[i], t);
            dst.push_back(scales[i].out(f));
            if (i == 1) penult16[static_cast<std::size_t>(h)] = f;
        }
    }

    Tensor s = L.seg_csp1(upsample_nearest2x(f8), t);
    s = L.seg_csp2(upsample_nearest2x(s), t);
    out.seg_logits = L.seg_out(upsample_nearest2x(s));

    const int p = config_.pci_pool;
    const Tensor pooled = concat({adaptive_avg_pool2d(out.seg_logits, p, p),
                                  adaptive_avg_pool2d(L.align_linear(penult16[0]), p, p),
                                  adaptive_avg_pool2d(L.align_pattern(penult16[1]), p, p)},
                                 1);
    const Tensor hidden = silu(L.fc1(flatten(pooled)));
    const Tensor z = L.fc2(hidden);
    out.pci = scale(sigmoid(reshape(z, {images.dim(0)})), Real(100));
    return out;
}

std::filesystem::path config_sidecar(const std::filesystem::path& checkpoint) {
    return std::filesystem::path(checkpoint.string() + ".json");
}

void Net::save(const std::filesystem::path& file) const {
    save_checkpoint(file, store_.state());
    const auto sidecar = config_sidecar(file);
    std::ofstream out(sidecar, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + sidecar.string());
    out << config_.to_json();
}

Net Net::load(const std::filesystem::path& file) {
    const auto sidecar = config_sidecar(file);
    if (!std::filesystem::exists(sidecar)) throw ConfigError("missing network config " + sidecar.string());
    std::ifstream in(sidecar, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    Net net(NetConfig::from_json(ss.str()), 0);
    net.store_.load_state(load_checkpoint(file));
    return net;
}

Tensor image_batch(const std::vector<const GrayImage*>& images) {
    if (images.empty()) throw ShapeError("image_batch: empty batch");
    const int h = images[0]->height, w = images[0]->width;
    std::vector<Real> v;
    v.reserve(images.size() * static_cast<std::size_t>(h) * w);
    for (const GrayImage* img : images) {
        if (img->width != w || img->height != h) throw ShapeError("image_batch: images differ in size");
        for (std::uint8_t p : img->pixels) v.push_back((static_cast<Real>(p) / Real(255) - Real(0.5)) / Real(0.25));
    }
    return Tensor::from({static_cast<int>(images.size()), 1, h, w}, std::move(v));
}

double box_iou_xyxy(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
    const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

namespace {

bool ranks_before(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.grid_index != b.grid_index) return a.grid_index < b.grid_index;
    return a.class_id < b.class_id;
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

std::vector<Detection> nms(std::vector<Detection> candidates, double iou_threshold) {
    std::sort(candidates.begin(), candidates.end(), ranks_before);
    std::vector<Detection> kept;
    for (const Detection& d : candidates) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_id == d.class_id && box_iou_xyxy(k.box_xyxy, d.box_xyxy) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

std::vector<Detection> decode_detections(const std::vector<Tensor>& scales, const std::vector<ScaleLayout>& layout,
                                         std::size_t n, double conf_threshold, double nms_iou) {
    if (!(conf_threshold > 0 && conf_threshold < 1) || !(nms_iou > 0 && nms_iou < 1)) {
        throw std::invalid_argument("decode_detections: thresholds must lie in (0, 1)");
    }
    if (scales.size() != layout.size()) throw ShapeError("decode_detections: scale count mismatch");
    std::vector<Detection> candidates;
    std::size_t offset = 0;
    for (std::size_t s = 0; s < scales.size(); ++s) {
        const ScaleLayout& L = layout[s];
        const Tensor& t = scales[s];
        const int A = static_cast<int>(L.anchors.size()), per = L.channels_per_anchor();
        if (t.rank() != 4 || t.dim(1) != A * per || t.dim(2) != L.grid_h || t.dim(3) != L.grid_w ||
            static_cast<int>(n) >= t.dim(0)) {
            throw ShapeError("decode_detections: output " + shape_str(t.shape()) + " does not match the layout");
        }
        const std::size_t plane = static_cast<std::size_t>(L.grid_h) * L.grid_w;
        const Real* base = t.data().data() + n * static_cast<std::size_t>(A * per) * plane;
        for (int a = 0; a < A; ++a) {
            for (int gy = 0; gy < L.grid_h; ++gy) {
                for (int gx = 0; gx < L.grid_w; ++gx) {
                    const std::size_t cell = static_cast<std::size_t>(gy) * L.grid_w + gx;
                    auto ch = [&](int j) {
                        return static_cast<double>(base[static_cast<std::size_t>(a * per + j) * plane + cell]);
                    };
                    const double obj = sigmoid_d(ch(4));
                    const double cx = (gx + sigmoid_d(ch(0))) * L.stride;
                    const double cy = (gy + sigmoid_d(ch(1))) * L.stride;
                    const double sw = 2.0 * sigmoid_d(ch(2)), sh = 2.0 * sigmoid_d(ch(3));
                    const double w = L.anchors[static_cast<std::size_t>(a)].w * sw * sw;
                    const double h = L.anchors[static_cast<std::size_t>(a)].h * sh * sh;
                    const std::size_t index = offset + static_cast<std::size_t>(a) * plane + cell;
                    for (int k = 0; k < L.n_classes; ++k) {
                        const double score = obj * sigmoid_d(ch(5 + k));
                        if (score >= conf_threshold) {
                            candidates.push_back({{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, k, score, index});
                        }
                    }
                }
            }
        }
        offset += static_cast<std::size_t>(A) * plane;
    }
    return nms(std::move(candidates), nms_iou);
}

} // namespace I2P_NN_ABI
} // namespace i2p::model
