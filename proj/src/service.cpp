#include "image2pci/service.hpp"

#include <cmath>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "image2pci/errors.hpp"
#include "image2pci/image_io.hpp"

namespace i2p {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct BadRequest : std::runtime_error {
    using std::runtime_error::runtime_error;
};

HttpResponse json_response(int status, const ordered_json& body) { return {status, "application/json", body.dump(), {}}; }

HttpResponse error(int status, const std::string& message) { return json_response(status, {{"error", message}}); }

json parse_body(const std::string& body) {
    try {
        json j = json::parse(body);
        if (!j.is_object()) throw BadRequest("request body must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw BadRequest(std::string("malformed JSON: ") + e.what());
    }
}

const json& field(const json& j, const char* name) {
    if (!j.contains(name)) throw BadRequest(std::string("missing field '") + name + "'");
    return j.at(name);
}

double number(const json& j, const char* what) {
    if (!j.is_number()) throw BadRequest(std::string(what) + " must be a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw BadRequest(std::string(what) + " must be finite");
    return v;
}

Point point(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 2) throw BadRequest(std::string(what) + " must be [x, y]");
    return {number(j[0], what), number(j[1], what)};
}

std::string text(const json& j, const char* what) {
    if (!j.is_string()) throw BadRequest(std::string(what) + " must be a string");
    return j.get<std::string>();
}

DistressType distress_type(const json& j) {
    const auto t = parse_distress_type(text(j, "distress_type"));
    if (!t) throw BadRequest("unknown distress_type '" + j.get<std::string>() + "'");
    return *t;
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : path) {
        if (c == '/') {
            if (!cur.empty()) parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) parts.push_back(cur);
    return parts;
}

ordered_json detections_json(const std::vector<model::Detection>& dets, model::Head head) {
    ordered_json out = ordered_json::array();
    for (const auto& d : dets) {
        const DistressType t = head == model::Head::Linear
                                   ? (d.class_id == 0 ? DistressType::Longitudinal : DistressType::Transverse)
                                   : (d.class_id == 0   ? DistressType::Alligator
                                      : d.class_id == 1 ? DistressType::Block
                                                        : DistressType::Patch);
        out.push_back({{"box_xyxy", d.box_xyxy}, {"distress_type", std::string(to_string(t))}, {"score", d.score}});
    }
    return out;
}

} // namespace

std::vector<std::size_t> run_length_encode(const std::vector<std::uint8_t>& bits) {
    std::vector<std::size_t> runs;
    std::size_t i = 0;
    while (i < bits.size()) {
        if (!bits[i]) {
            ++i;
            continue;
        }
        const std::size_t start = i;
        while (i < bits.size() && bits[i]) ++i;
        runs.push_back(start);
        runs.push_back(i - start);
    }
    return runs;
}

std::string pci_report_json(const PciReport& r) {
    ordered_json j;
    j["densities"] = r.densities;
    j["deducts"] = r.deducts;
    j["allowed_deducts"] = r.allowed_deducts;
    ordered_json its = ordered_json::array();
    for (const auto& it : r.iterations) {
        its.push_back({{"q", it.q}, {"tdv", it.tdv}, {"cdv", it.cdv}, {"deducts", it.deducts}});
    }
    j["iterations"] = its;
    j["max_cdv"] = r.max_cdv;
    j["pci"] = r.pci;
    j["rating"] = r.rating;
    return j.dump();
}

Service::Service(std::filesystem::path data_root, std::vector<ImageAnnotation> dataset, SeverityThresholds thresholds,
                 DeductCurveSet curves, std::optional<model::Net> net, bool cors)
    : root_(std::move(data_root)), thresholds_(std::move(thresholds)), curves_(std::move(curves)), cors_(cors) {
    if (net) net_ = std::make_unique<model::Net>(std::move(*net));
    for (auto& a : dataset) {
        Entry e;
        try {
            e.report = image_pci(a, curves_);
        } catch (const DataError& err) {
            e.label_error = err.what();
        }
        const std::string id = a.image_id;
        e.annotation = std::move(a);
        entries_.emplace(id, std::move(e));
    }
}

Service Service::open(const std::filesystem::path& data_root, const std::filesystem::path& curves,
                      const std::optional<std::filesystem::path>& thresholds,
                      const std::optional<std::filesystem::path>& checkpoint, bool cors) {
    std::optional<model::Net> net;
    if (checkpoint) net.emplace(model::Net::load(*checkpoint));
    return Service(data_root, parse_dataset(data_root), thresholds ? SeverityThresholds::load(*thresholds)
                                                                   : SeverityThresholds::defaults(),
                   DeductCurveSet::load(curves), std::move(net), cors);
}

std::optional<double> Service::pci_label(const std::string& image_id) const {
    const Entry* e = find(image_id);
    if (e == nullptr || !e->report) return std::nullopt;
    return e->report->pci;
}

const Service::Entry* Service::find(const std::string& id) const {
    const auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : &it->second;
}

HttpResponse Service::finish(HttpResponse r) const {
    if (cors_) {
        r.headers.emplace_back("Access-Control-Allow-Origin", "*");
        r.headers.emplace_back("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        r.headers.emplace_back("Access-Control-Allow-Headers", "Content-Type");
    }
    return r;
}

HttpResponse Service::handle(const std::string& method, const std::string& path, const std::string& body) const {
    try {
        if (method == "OPTIONS") return finish({204, "text/plain", "", {}});
        const auto parts = split_path(path);
        if (parts.empty() || parts[0] != "api") return finish(error(404, "no such endpoint " + path));
        if (method == "GET" && parts.size() == 2 && parts[1] == "images") return finish(images());
        if (method == "GET" && parts.size() == 4 && parts[1] == "images") {
            const Entry* e = find(parts[2]);
            if (e == nullptr) return finish(error(404, "unknown image id '" + parts[2] + "'"));
            if (parts[3] == "file") return finish(image_file(*e));
            if (parts[3] == "annotations") return finish(annotations(*e));
        }
        if (method == "POST" && parts.size() == 2) {
            if (parts[1] == "measure") return finish(measure(body));
            if (parts[1] == "severity") return finish(severity(body));
            if (parts[1] == "pci") return finish(pci(body));
            if (parts[1] == "infer") return finish(infer(body));
        }
        return finish(error(404, "no such endpoint " + method + " " + path));
    } catch (const BadRequest& e) {
        return finish(error(400, e.what()));
    } catch (const GeometryError& e) {
        return finish(error(400, e.what()));
    } catch (const json::exception& e) {
        return finish(error(400, e.what()));
    } catch (const DataError& e) {
        return finish(error(400, e.what()));
    } catch (const ConfigError& e) {
        return finish(error(400, e.what()));
    }
}

HttpResponse Service::images() const {
    ordered_json out = ordered_json::array();
    for (const auto& [id, e] : entries_) {
        out.push_back({{"image_id", id},
                       {"width_px", e.annotation.width_px},
                       {"height_px", e.annotation.height_px},
                       {"pci_label", e.report ? ordered_json(e.report->pci) : ordered_json(nullptr)}});
    }
    return json_response(200, out);
}

HttpResponse Service::image_file(const Entry& e) const {
    const auto file = image_path(root_, e.annotation.image_id);
    if (!std::filesystem::exists(file)) return error(404, "image file missing for '" + e.annotation.image_id + "'");
    return {200, "image/png", read_file_bytes(file), {}};
}

HttpResponse Service::annotations(const Entry& e) const {
    return {200, "application/json", serialize_annotation(e.annotation), {}};
}

HttpResponse Service::measure(const std::string& body) const {
    const json j = parse_body(body);
    const std::string id = text(field(j, "image_id"), "image_id");
    const Point p1 = point(field(j, "p1"), "p1"), p2 = point(field(j, "p2"), "p2");
    const Entry* e = find(id);
    if (e == nullptr) return error(404, "unknown image id '" + id + "'");
    const ImageScale scale = ImageScale::of(e->annotation);
    const double px = width_between(p1, p2);
    return json_response(200, {{"px_width", px}, {"mm_width", scale.along(p1, p2).to_mm(px)}});
}

HttpResponse Service::severity(const std::string& body) const {
    const json j = parse_body(body);
    const std::string id = text(field(j, "image_id"), "image_id");
    const DistressType type = distress_type(field(j, "distress_type"));
    const Entry* e = find(id);
    if (e == nullptr) return error(404, "unknown image id '" + id + "'");
    const ImageScale scale = ImageScale::of(e->annotation);
    WidthMeasurement m;
    if (j.contains("pairs")) {
        const json& pairs = j.at("pairs");
        if (!pairs.is_array() || pairs.size() != 3) throw BadRequest("pairs must hold three [p1, p2] picks");
        std::array<PointPair, 3> picks;
        for (std::size_t i = 0; i < 3; ++i) {
            if (!pairs[i].is_array() || pairs[i].size() != 2) throw BadRequest("each pair must be [p1, p2]");
            picks[i] = {point(pairs[i][0], "pairs"), point(pairs[i][1], "pairs")};
        }
        m = measure_width(std::span<const PointPair, 3>(picks), scale, type, thresholds_);
    } else {
        const json& s = field(j, "samples_px");
        if (!s.is_array() || s.size() != 3) throw BadRequest("samples_px must hold three numbers");
        m = measure_width(std::array<double, 3>{number(s[0], "samples_px"), number(s[1], "samples_px"),
                                                number(s[2], "samples_px")},
                          scale.x, type, thresholds_);
    }
    return json_response(200, {{"mean_mm", m.mean_mm}, {"severity", std::string(to_string(m.severity))}});
}

HttpResponse Service::pci(const std::string& body) const {
    const json j = parse_body(body);
    const bool by_id = j.contains("image_id"), by_records = j.contains("records");
    if (by_id == by_records) throw BadRequest("give either image_id or records with sample_area_m2");
    if (by_id) {
        const std::string id = text(j.at("image_id"), "image_id");
        const Entry* e = find(id);
        if (e == nullptr) return error(404, "unknown image id '" + id + "'");
        if (!e->report) return error(400, e->label_error);
        return {200, "application/json", pci_report_json(*e->report), {}};
    }
    const json& recs = j.at("records");
    if (!recs.is_array()) throw BadRequest("records must be an array");
    const double area = number(field(j, "sample_area_m2"), "sample_area_m2");
    if (area <= 0) throw BadRequest("sample_area_m2 must be positive");
    std::vector<DistressRecord> records;
    for (const json& r : recs) {
        if (!r.is_object()) throw BadRequest("each record must be an object");
        DistressRecord d;
        d.distress_type = distress_type(field(r, "distress_type"));
        if (d.distress_type == DistressType::Manhole) throw BadRequest("manhole is not a distress");
        const auto s = parse_severity(text(field(r, "severity"), "severity"));
        if (!s) throw BadRequest("unknown severity");
        d.severity = *s;
        d.extent = number(field(r, "extent"), "extent");
        if (d.extent < 0) throw BadRequest("extent must be non-negative");
        records.push_back(d);
    }
    return {200, "application/json", pci_report_json(compute_pci(records, area, curves_)), {}};
}

HttpResponse Service::infer(const std::string& body) const {
    const json j = parse_body(body);
    const std::string id = text(field(j, "image_id"), "image_id");
    const double conf = j.contains("conf_threshold") ? number(j.at("conf_threshold"), "conf_threshold") : 0.25;
    const double nms_iou = j.contains("nms_iou") ? number(j.at("nms_iou"), "nms_iou") : 0.5;
    if (!(conf > 0 && conf < 1) || !(nms_iou > 0 && nms_iou < 1)) throw BadRequest("thresholds must lie in (0, 1)");
    const Entry* e = find(id);
    if (e == nullptr) return error(404, "unknown image id '" + id + "'");
    if (!net_) return error(409, "no model loaded");

    const GrayImage image = read_png(image_path(root_, id));
    const model::NetConfig& cfg = net_->config();
    if (image.width != cfg.input_w || image.height != cfg.input_h) {
        throw BadRequest("image size does not match the loaded model");
    }
    std::lock_guard<std::mutex> lock(infer_mutex_);
    return {200, "application/json", infer_json(*net_, image, conf, nms_iou), {}};
}

std::string infer_json(model::Net& net, const GrayImage& image, double conf_threshold, double nms_iou) {
    nn::NoGradGuard guard;
    const model::NetConfig& cfg = net.config();
    const model::ForwardOutputs out = net.forward(model::image_batch({&image}), false);
    const auto lin = model::decode_detections(out.det_linear, model::head_layout(cfg, model::Head::Linear), 0,
                                              conf_threshold, nms_iou);
    const auto pat = model::decode_detections(out.det_pattern, model::head_layout(cfg, model::Head::Pattern), 0,
                                              conf_threshold, nms_iou);
    const std::size_t plane = static_cast<std::size_t>(image.width) * image.height;
    std::vector<std::uint8_t> mask(plane);
    const auto logits = out.seg_logits.data();
    for (std::size_t p = 0; p < plane; ++p) mask[p] = logits[plane + p] > logits[p] ? 1 : 0;
    ordered_json r;
    r["boxes_linear"] = detections_json(lin, model::Head::Linear);
    r["boxes_pattern"] = detections_json(pat, model::Head::Pattern);
    r["mask_rle"] = run_length_encode(mask);
    r["pci"] = static_cast<double>(out.pci.data()[0]);
    return r.dump();
}

struct HttpServer::Impl {
    httplib::Server server;
};

HttpServer::HttpServer(const Service& service) : impl_(std::make_unique<Impl>()) {
    auto dispatch = [&service](const httplib::Request& req, httplib::Response& res) {
        const HttpResponse r = service.handle(req.method, req.path, req.body);
        res.status = r.status;
        for (const auto& [k, v] : r.headers) res.set_header(k, v);
        res.set_content(r.body, r.content_type);
    };
    impl_->server.Get(".*", dispatch);
    impl_->server.Post(".*", dispatch);
    impl_->server.Options(".*", dispatch);
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : impl_->server.bind_to_port(host, port) ? port : -1;
    if (bound < 0) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

bool is_loopback_host(const std::string& host) {
    return host == "localhost" || host == "::1" || host.rfind("127.", 0) == 0;
}

void serve(const Service& service, const std::string& host, int port) {
    HttpServer server(service);
    server.bind(host, port);
    server.listen();
}

} // namespace i2p
