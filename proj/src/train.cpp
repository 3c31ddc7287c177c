#include "image2pci/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "image2pci/errors.hpp"
#include "image2pci/nn/optim.hpp"
#include "image2pci/nn/params.hpp"
#include "image2pci/rng.hpp"

namespace i2p {

using namespace i2p::model;
using nlohmann::ordered_json;
using nn::Real;
using nn::Tensor;

namespace {

constexpr double kPi = 3.14159265358979323846;

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
}

std::string optimizer_name(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "adam"; }
std::string schedule_name(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "constant"; }

ordered_json number_or_null(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

ordered_json histogram_json(const std::vector<HistogramBin>& bins) {
    ordered_json out = ordered_json::array();
    for (const auto& b : bins) out.push_back({b.lo, b.hi, b.count});
    return out;
}

Tensor batch_of(const std::vector<const Example*>& items) {
    std::vector<const GrayImage*> images;
    for (const Example* e : items) images.push_back(&e->image);
    return image_batch(images);
}

double lr_at(const TrainConfig& c, std::size_t step, std::size_t total) {
    if (c.warmup_steps > 0 && step < static_cast<std::size_t>(c.warmup_steps)) {
        return c.lr * static_cast<double>(step + 1) / c.warmup_steps;
    }
    if (c.schedule == LrSchedule::Constant || total <= 1) return c.lr;
    const double t = static_cast<double>(step) / static_cast<double>(total - 1);
    return c.lr_final + 0.5 * (c.lr - c.lr_final) * (1.0 + std::cos(kPi * t));
}

void clip_gradients(std::vector<Tensor>& params, double max_norm) {
    double sq = 0;
    for (const Tensor& p : params)
        for (Real g : p.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0) return;
    const Real s = static_cast<Real>(max_norm / norm);
    for (Tensor& p : params) {
        if (p.grad().empty()) continue;
        for (Real& g : p.mutable_grad()) g *= s;
    }
}

std::vector<Box> truth_boxes(const ImageAnnotation& a, Head head, std::vector<int>& classes) {
    std::vector<Box> out;
    for (const auto& poly : a.annotations) {
        if (head == Head::Linear ? !is_linear(poly.distress_type) : !is_pattern(poly.distress_type)) continue;
        out.push_back(bounding_box(poly.vertices));
        classes.push_back(head == Head::Linear ? linear_class(poly.distress_type) : pattern_class(poly.distress_type));
    }
    return out;
}

void tally(DetectionSummary& s, const std::vector<Detection>& dets, const std::vector<Box>& truth,
           const std::vector<int>& classes) {
    s.ground_truth += truth.size();
    s.predicted += dets.size();
    std::vector<bool> used(truth.size(), false);
    for (const Detection& d : dets) {
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (used[i] || classes[i] != d.class_id) continue;
            const std::array<double, 4> t{truth[i].x0, truth[i].y0, truth[i].x1, truth[i].y1};
            if (box_iou_xyxy(d.box_xyxy, t) >= 0.5) {
                used[i] = true;
                ++s.matched;
                break;
            }
        }
    }
}

} // namespace

void TrainConfig::validate() const {
    require(epochs >= 0, "epochs must be >= 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(std::isfinite(lr) && lr > 0, "lr must be > 0");
    require(std::isfinite(lr_final) && lr_final >= 0, "lr_final must be >= 0");
    require(warmup_steps >= 0, "warmup_steps must be >= 0");
    require(momentum >= 0 && momentum < 1, "momentum must lie in [0, 1)");
    require(std::isfinite(grad_clip) && grad_clip >= 0, "grad_clip must be >= 0");
    require(max_steps >= 0, "max_steps must be >= 0");
    require(overfit_k >= 0, "overfit_k must be >= 0");
    require(!anchor_match_iou || (*anchor_match_iou > 0 && *anchor_match_iou <= 1), "anchor_match_iou must lie in (0, 1]");
    weights.validate();
}

std::string TrainConfig::to_json() const {
    ordered_json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["lr_final"] = lr_final;
    j["schedule"] = schedule_name(schedule);
    j["warmup_steps"] = warmup_steps;
    j["optimizer"] = optimizer_name(optimizer);
    j["momentum"] = momentum;
    j["grad_clip"] = grad_clip;
    j["seed"] = seed;
    j["loss_weights"] = {{"gamma_det1", weights.gamma_det1}, {"gamma_det2", weights.gamma_det2},
                         {"gamma_seg", weights.gamma_seg},   {"gamma_pci", weights.gamma_pci},
                         {"beta_cls", weights.beta_cls},     {"beta_obj", weights.beta_obj},
                         {"beta_box", weights.beta_box}};
    j["anchor_match_iou"] = number_or_null(anchor_match_iou);
    j["max_steps"] = max_steps;
    j["overfit_k"] = overfit_k;
    j["hflip"] = hflip;
    return j.dump(2) + "\n";
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    TrainConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        for (const auto& [key, v] : j.items()) {
            if (key == "epochs") c.epochs = v.get<int>();
            else if (key == "batch_size") c.batch_size = v.get<int>();
            else if (key == "lr") c.lr = v.get<double>();
            else if (key == "lr_final") c.lr_final = v.get<double>();
            else if (key == "schedule") {
                const auto s = v.get<std::string>();
                require(s == "cosine" || s == "constant", "schedule must be cosine or constant");
                c.schedule = s == "cosine" ? LrSchedule::Cosine : LrSchedule::Constant;
            } else if (key == "warmup_steps") c.warmup_steps = v.get<int>();
            else if (key == "optimizer") {
                const auto s = v.get<std::string>();
                require(s == "sgd" || s == "adam", "optimizer must be sgd or adam");
                c.optimizer = s == "sgd" ? Optimizer::Sgd : Optimizer::Adam;
            } else if (key == "momentum") c.momentum = v.get<double>();
            else if (key == "grad_clip") c.grad_clip = v.get<double>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "loss_weights") {
                for (const auto& [k, w] : v.items()) {
                    double* slot = k == "gamma_det1" ? &c.weights.gamma_det1
                                   : k == "gamma_det2" ? &c.weights.gamma_det2
                                   : k == "gamma_seg"  ? &c.weights.gamma_seg
                                   : k == "gamma_pci"  ? &c.weights.gamma_pci
                                   : k == "beta_cls"   ? &c.weights.beta_cls
                                   : k == "beta_obj"   ? &c.weights.beta_obj
                                   : k == "beta_box"   ? &c.weights.beta_box
                                                       : nullptr;
                    require(slot != nullptr, "unknown loss weight " + k);
                    *slot = w.get<double>();
                }
            } else if (key == "anchor_match_iou") {
                c.anchor_match_iou = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
            } else if (key == "max_steps") c.max_steps = v.get<int>();
            else if (key == "overfit_k") c.overfit_k = v.get<int>();
            else if (key == "hflip") c.hflip = v.get<bool>();
            else throw ConfigError("train config: unknown field " + key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<Example> load_examples(const std::vector<ImageAnnotation>& annotations, const std::filesystem::path& root,
                                   const NetConfig& config, std::optional<double> anchor_match_iou) {
    std::vector<Example> out;
    out.reserve(annotations.size());
    for (const auto& a : annotations) {
        Example e;
        e.annotation = a;
        const auto file = image_path(root, a.image_id);
        if (!std::filesystem::exists(file)) {
            throw DataError(DataErrorKind::MissingFile, a.image_id, DataError::npos, "missing image " + file.string());
        }
        e.image = read_png(file);
        if (e.image.width != a.width_px || e.image.height != a.height_px) {
            throw DataError(DataErrorKind::OutOfBounds, a.image_id, DataError::npos, "image size differs from annotation");
        }
        e.targets = assign_targets(a, config, anchor_match_iou);
        out.push_back(std::move(e));
    }
    return out;
}

Example hflip(const Example& e, const NetConfig& config, std::optional<double> anchor_match_iou) {
    Example f = e;
    const int w = e.image.width;
    for (int y = 0; y < e.image.height; ++y)
        for (int x = 0; x < w; ++x) f.image.at(x, y) = e.image.at(w - 1 - x, y);
    for (auto& poly : f.annotation.annotations) {
        for (auto& p : poly.vertices) p.x = w - p.x;
        std::reverse(poly.vertices.begin(), poly.vertices.end());
    }
    f.targets = assign_targets(f.annotation, config, anchor_match_iou);
    return f;
}

std::string EpochMetrics::to_json() const {
    ordered_json j;
    j["epoch"] = epoch;
    j["l_det1"] = l_det1;
    j["l_det2"] = l_det2;
    j["l_seg"] = l_seg;
    j["l_pci"] = l_pci;
    j["total"] = total;
    j["val_mape"] = val_mape;
    j["val_r2"] = number_or_null(val_r2);
    return j.dump();
}

double r_squared(const std::vector<double>& actual, const std::vector<double>& predicted) {
    if (actual.size() != predicted.size()) throw EvalError("r_squared: size mismatch");
    if (actual.size() < 2) throw EvalError("R^2 is undefined for fewer than two samples");
    const double mean = std::accumulate(actual.begin(), actual.end(), 0.0) / static_cast<double>(actual.size());
    double ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        ss_res += (actual[i] - predicted[i]) * (actual[i] - predicted[i]);
        ss_tot += (actual[i] - mean) * (actual[i] - mean);
    }
    if (ss_tot == 0) return ss_res == 0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

double mape_pct(const std::vector<double>& actual, const std::vector<double>& predicted) {
    if (actual.size() != predicted.size()) throw EvalError("mape: size mismatch");
    if (actual.empty()) throw EvalError("mape: no samples");
    double s = 0;
    for (std::size_t i = 0; i < actual.size(); ++i) s += std::abs(actual[i] - predicted[i]) / std::max(actual[i], kMapeFloor);
    return 100.0 * s / static_cast<double>(actual.size());
}

std::vector<double> predict_pci(Net& net, const std::vector<Example>& examples, int batch_size) {
    nn::NoGradGuard guard;
    std::vector<double> out;
    for (std::size_t i = 0; i < examples.size(); i += static_cast<std::size_t>(batch_size)) {
        std::vector<const Example*> items;
        for (std::size_t j = i; j < std::min(examples.size(), i + static_cast<std::size_t>(batch_size)); ++j) {
            items.push_back(&examples[j]);
        }
        const ForwardOutputs o = net.forward(batch_of(items), false);
        for (Real p : o.pci.data()) out.push_back(static_cast<double>(p));
    }
    return out;
}

TrainResult train(Net& net, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                  std::ostream* metrics_log) {
    config.validate();
    if (train_set.empty()) throw ConfigError("train: empty training split");

    std::vector<Example> train_items, val_items;
    const std::vector<Example>* tr = &train_set;
    const std::vector<Example>* va = &val_set;
    if (config.overfit_k > 0) {
        const std::size_t k = std::min(train_set.size(), static_cast<std::size_t>(config.overfit_k));
        train_items.assign(train_set.begin(), train_set.begin() + static_cast<std::ptrdiff_t>(k));
        tr = va = &train_items;
    }
    std::vector<Example> flipped;
    if (config.hflip) {
        for (const Example& e : *tr) flipped.push_back(i2p::hflip(e, net.config(), config.anchor_match_iou));
    }

    std::vector<Tensor> params = net.params().parameters();
    nn::Sgd sgd(params, static_cast<Real>(config.momentum));
    nn::Adam adam(params);

    const std::size_t n = tr->size();
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    const std::size_t per_epoch = (n + bs - 1) / bs;
    std::size_t total_steps = per_epoch * static_cast<std::size_t>(config.epochs);
    if (config.max_steps > 0) total_steps = std::min(total_steps, static_cast<std::size_t>(config.max_steps));

    TrainResult result;
    std::string best_state = nn::encode_checkpoint(net.params().state());
    auto val_mape_now = [&]() {
        if (va->empty()) return 0.0;
        std::vector<double> y;
        for (const Example& e : *va) y.push_back(e.targets.pci);
        return mape_pct(y, predict_pci(net, *va));
    };
    result.best_val_mape = val_mape_now();
    if (checkpoint) net.save(*checkpoint);

    std::size_t step = 0;
    for (int epoch = 1; epoch <= config.epochs && step < total_steps; ++epoch) {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        std::vector<bool> flip(n, false);
        if (config.hflip) {
            for (std::size_t i = 0; i < n; ++i) flip[i] = rng.uniform() < 0.5;
        }

        EpochMetrics m;
        m.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n && step < total_steps; start += bs) {
            std::vector<const Example*> items;
            std::vector<const ImageTargets*> targets;
            for (std::size_t j = start; j < std::min(n, start + bs); ++j) {
                const std::size_t idx = order[j];
                const Example* e = flip[idx] ? &flipped[idx] : &(*tr)[idx];
                items.push_back(e);
                targets.push_back(&e->targets);
            }
            LossBreakdown loss;
            try {
                const ForwardOutputs out = net.forward(batch_of(items), true);
                loss = total_loss(out, targets, net.config(), config.weights);
            } catch (const NonFiniteLoss& e) {
                net.params().load_state(nn::decode_checkpoint(best_state));
                throw TrainingDiverged("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
            }
            nn::zero_grad(params);
            nn::backward(loss.total);
            if (config.grad_clip > 0) clip_gradients(params, config.grad_clip);
            const Real lr = static_cast<Real>(lr_at(config, step, total_steps));
            if (config.optimizer == Optimizer::Sgd) sgd.step(lr);
            else adam.step(lr);
            ++step;
            ++batches;
            result.step_losses.push_back(loss.total.item());
            m.l_det1 += loss.l_det1;
            m.l_det2 += loss.l_det2;
            m.l_seg += loss.l_seg;
            m.l_pci += loss.l_pci;
            m.total += loss.total.item();
        }
        const double b = static_cast<double>(batches);
        m.l_det1 /= b;
        m.l_det2 /= b;
        m.l_seg /= b;
        m.l_pci /= b;
        m.total /= b;

        if (!va->empty()) {
            std::vector<double> y;
            for (const Example& e : *va) y.push_back(e.targets.pci);
            const std::vector<double> yhat = predict_pci(net, *va);
            m.val_mape = mape_pct(y, yhat);
            if (y.size() >= 2) m.val_r2 = r_squared(y, yhat);
        }
        result.epochs.push_back(m);
        if (metrics_log) *metrics_log << m.to_json() << "\n" << std::flush;

        const bool improved = va->empty() || m.val_mape < result.best_val_mape;
        if (improved) {
            result.best_val_mape = m.val_mape;
            result.best_epoch = epoch;
            best_state = nn::encode_checkpoint(net.params().state());
            if (checkpoint) net.save(*checkpoint);
        }
    }
    result.steps = step;
    net.params().load_state(nn::decode_checkpoint(best_state));
    return result;
}

EvalReport evaluate(Net& net, const std::vector<Example>& examples, double bin_width, double conf_threshold,
                    double nms_iou) {
    if (examples.size() < 2) throw EvalError("evaluate needs at least two images");
    nn::NoGradGuard guard;
    EvalReport r;
    std::vector<double> y, yhat;
    std::size_t correct = 0, pixels = 0;
    const auto lin_layout = head_layout(net.config(), Head::Linear);
    const auto pat_layout = head_layout(net.config(), Head::Pattern);
    for (std::size_t i = 0; i < examples.size(); i += 16) {
        std::vector<const Example*> items;
        for (std::size_t j = i; j < std::min(examples.size(), i + 16); ++j) items.push_back(&examples[j]);
        const ForwardOutputs o = net.forward(batch_of(items), false);
        const std::size_t plane = static_cast<std::size_t>(o.seg_logits.dim(2)) * o.seg_logits.dim(3);
        for (std::size_t k = 0; k < items.size(); ++k) {
            const Example& e = *items[k];
            y.push_back(e.targets.pci);
            yhat.push_back(static_cast<double>(o.pci.data()[k]));
            r.pairs.push_back({e.annotation.image_id, y.back(), yhat.back()});
            const Real* s = o.seg_logits.data().data() + k * 2 * plane;
            for (std::size_t p = 0; p < plane; ++p) {
                const std::uint8_t pred = s[plane + p] > s[p] ? 1 : 0;
                correct += pred == e.targets.seg.bits[p];
            }
            pixels += plane;
            std::vector<int> lc, pc;
            const auto lt = truth_boxes(e.annotation, Head::Linear, lc);
            const auto pt = truth_boxes(e.annotation, Head::Pattern, pc);
            tally(r.linear, decode_detections(o.det_linear, lin_layout, k, conf_threshold, nms_iou), lt, lc);
            tally(r.pattern, decode_detections(o.det_pattern, pat_layout, k, conf_threshold, nms_iou), pt, pc);
        }
    }
    r.r2 = r_squared(y, yhat);
    r.mape_pct = mape_pct(y, yhat);
    r.histogram = histogram(y, bin_width);
    std::vector<double> clamped(yhat);
    for (double& v : clamped) v = std::clamp(v, 0.0, 100.0);
    r.predicted_histogram = histogram(clamped, bin_width);
    r.seg_pixel_accuracy = static_cast<double>(correct) / static_cast<double>(pixels);
    return r;
}

std::string EvalReport::to_json() const {
    ordered_json j;
    j["n"] = pairs.size();
    j["r2"] = r2;
    j["mape_pct"] = mape_pct;
    j["seg_pixel_accuracy"] = seg_pixel_accuracy;
    ordered_json scatter = ordered_json::array(), ids = ordered_json::array();
    for (const auto& p : pairs) {
        scatter.push_back({p.actual, p.predicted});
        ids.push_back(p.image_id);
    }
    j["scatter"] = scatter;
    j["image_ids"] = ids;
    j["histogram"] = histogram_json(histogram);
    j["predicted_histogram"] = histogram_json(predicted_histogram);
    auto det = [](const DetectionSummary& s) {
        return ordered_json{{"ground_truth", s.ground_truth}, {"predicted", s.predicted}, {"matched", s.matched}};
    };
    j["detection"] = {{"linear", det(linear)}, {"pattern", det(pattern)}};
    return j.dump(2) + "\n";
}

} // namespace i2p
