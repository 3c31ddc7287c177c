#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "image2pci/annotation.hpp"
#include "image2pci/errors.hpp"
#include "image2pci/geometry.hpp"
#include "image2pci/pci.hpp"
#include "image2pci/service.hpp"
#include "image2pci/synth.hpp"
#include "image2pci/train.hpp"

namespace fs = std::filesystem;
using namespace i2p;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

std::string read_text(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + file.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& file, const std::string& text) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + file.string());
    out << text << "\n";
}

SeverityThresholds thresholds_or_default(const std::string& file) {
    return file.empty() ? SeverityThresholds::defaults() : SeverityThresholds::load(file);
}

// Split file when the dataset has one, else the whole manifest.
std::vector<ImageAnnotation> load_part(const fs::path& root, const std::string& part) {
    const fs::path file = root / (part + ".txt");
    if (fs::exists(file)) return parse_dataset(root, file);
    return parse_dataset(root);
}

std::vector<ImageAnnotation> relabel(std::vector<ImageAnnotation> images, const std::string& curves) {
    if (curves.empty()) return images;
    return label_dataset(std::move(images), DeductCurveSet::load(curves));
}

struct Options {
    // synth
    fs::path out;
    std::size_t count = 200;
    std::uint64_t seed = 1;
    int size = 96;
    std::string synth_config;
    std::vector<double> split{0.8, 0.1, 0.1};
    // shared
    fs::path data;
    std::string curves;
    std::string thresholds;
    std::string ckpt;
    double bin_width = 10.0;
    // train
    std::string train_config;
    std::string net_config;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<std::string> optimizer;
    std::string metrics;
    // eval / infer
    std::string report;
    std::string part = "test";
    std::string image;
    double conf = 0.25;
    double nms = 0.5;
    // serve
    std::string host = "127.0.0.1";
    int port = 8080;
};

int run_synth(const Options& o) {
    SynthConfig cfg = o.synth_config.empty() ? SynthConfig{} : SynthConfig::from_json(read_text(o.synth_config));
    cfg.n_images = static_cast<int>(o.count);
    cfg.seed = o.seed;
    if (o.synth_config.empty()) {
        cfg.footprint_mm = {cfg.footprint_mm[0] * o.size / cfg.image_size_px, cfg.footprint_mm[1] * o.size / cfg.image_size_px};
        cfg.image_size_px = o.size;
    }
    if (o.curves.empty()) throw ConfigError("synth needs --curves to label the images");
    generate(cfg, o.out, thresholds_or_default(o.thresholds), DeductCurveSet::load(o.curves));
    if (o.split.size() != 3) throw ConfigError("--split takes three ratios");
    write_split(o.out, split(read_manifest(o.out / "manifest.txt"), {o.split[0], o.split[1], o.split[2]}, o.seed));
    std::cout << "wrote " << o.count << " images to " << o.out.string() << "\n";
    return kExitOk;
}

int run_label(const Options& o) {
    const auto entries = read_manifest(o.data / "manifest.txt");
    std::vector<ImageAnnotation> images;
    for (const auto& e : entries) images.push_back(load_annotation_file(o.data / e));
    const auto labeled = label_dataset(images, DeductCurveSet::load(o.curves));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        save_annotation_file(labeled[i], o.data / entries[i]);
        std::printf("%s\t%.6f\n", labeled[i].image_id.c_str(), *labeled[i].pci_label);
    }
    return kExitOk;
}

int run_stats(const Options& o) {
    const DatasetStats s = compute_stats(parse_dataset(o.data), o.bin_width);
    ordered_json j;
    j["total_annotations"] = s.total_annotations;
    for (const auto& [t, n] : s.counts_by_type) j["counts_by_type"][std::string(to_string(t))] = n;
    for (const auto& [sev, n] : s.counts_by_severity) j["counts_by_severity"][std::string(to_string(sev))] = n;
    j["pci_histogram"] = ordered_json::array();
    for (const auto& b : s.pci_histogram) j["pci_histogram"].push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}});
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int run_train(const Options& o) {
    TrainConfig tc = o.train_config.empty() ? TrainConfig{} : TrainConfig::from_json(read_text(o.train_config));
    if (o.epochs) tc.epochs = *o.epochs;
    if (o.lr) tc.lr = *o.lr;
    if (o.optimizer) tc.optimizer = *o.optimizer == "adam" ? Optimizer::Adam : Optimizer::Sgd;
    tc.seed = o.seed;
    tc.validate();
    const model::NetConfig nc = o.net_config.empty() ? model::NetConfig{} : model::NetConfig::from_json(read_text(o.net_config));
    nc.validate();

    const auto train_set = load_examples(relabel(load_part(o.data, "train"), o.curves), o.data, nc, tc.anchor_match_iou);
    std::vector<Example> val_set;
    if (fs::exists(o.data / "val.txt")) {
        val_set = load_examples(relabel(parse_dataset(o.data, o.data / "val.txt"), o.curves), o.data, nc, tc.anchor_match_iou);
    }
    std::ofstream metrics;
    if (!o.metrics.empty()) {
        metrics.open(o.metrics, std::ios::trunc);
        if (!metrics) throw ConfigError("cannot write " + o.metrics);
    }
    model::Net net(nc, o.seed);
    const TrainResult r = train(net, train_set, val_set, tc, fs::path(o.ckpt), o.metrics.empty() ? nullptr : &metrics);
    std::cout << "steps " << r.steps << ", best epoch " << r.best_epoch << ", val MAPE " << r.best_val_mape << "%\n";
    return kExitOk;
}

int run_eval(const Options& o) {
    model::Net net = model::Net::load(o.ckpt);
    const auto examples = load_examples(relabel(load_part(o.data, o.part), o.curves), o.data, net.config());
    const EvalReport r = evaluate(net, examples, o.bin_width, o.conf, o.nms);
    if (o.report.empty()) std::cout << r.to_json() << "\n";
    else write_text(o.report, r.to_json());
    std::cout << "R2 " << r.r2 << ", MAPE " << r.mape_pct << "%\n";
    return kExitOk;
}

int run_infer(const Options& o) {
    if (!fs::exists(o.image)) throw ConfigError("no image at " + o.image);
    model::Net net = model::Net::load(o.ckpt);
    const GrayImage image = read_png(o.image);
    if (image.width != net.config().input_w || image.height != net.config().input_h) {
        throw ConfigError("image size does not match the model input");
    }
    if (!(o.conf > 0 && o.conf < 1) || !(o.nms > 0 && o.nms < 1)) throw ConfigError("thresholds must lie in (0, 1)");
    std::cout << infer_json(net, image, o.conf, o.nms) << "\n";
    return kExitOk;
}

int run_serve(const Options& o) {
    const std::optional<fs::path> thresholds = o.thresholds.empty() ? std::nullopt : std::optional<fs::path>(o.thresholds);
    const std::optional<fs::path> ckpt = o.ckpt.empty() ? std::nullopt : std::optional<fs::path>(o.ckpt);
    const Service service = Service::open(o.data, o.curves, thresholds, ckpt, is_loopback_host(o.host));
    std::cerr << "serving " << o.data.string() << " on http://" << o.host << ":" << o.port
              << (service.has_model() ? "" : " (no model)") << "\n";
    serve(service, o.host, o.port);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pavement image annotation, PCI labeling and Image2PCI training"};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "generate a labeled synthetic dataset");
    synth->add_option("--out", o.out, "output directory")->required();
    synth->add_option("--count", o.count, "number of images")->check(CLI::PositiveNumber);
    synth->add_option("--seed", o.seed, "random seed");
    synth->add_option("--size", o.size, "image side in pixels")->check(CLI::PositiveNumber);
    synth->add_option("--config", o.synth_config, "synth config JSON (overrides --size)");
    synth->add_option("--curves", o.curves, "deduct curve JSON")->required();
    synth->add_option("--thresholds", o.thresholds, "severity threshold JSON");
    synth->add_option("--split", o.split, "train, val, test ratios")->expected(3);

    auto* label = app.add_subcommand("label", "write PCI labels into the annotation files");
    label->add_option("--data", o.data, "dataset root")->required();
    label->add_option("--curves", o.curves, "deduct curve JSON")->required();

    auto* stats = app.add_subcommand("stats", "distress counts and label histogram");
    stats->add_option("--data", o.data, "dataset root")->required();
    stats->add_option("--bin-width", o.bin_width, "histogram bin width")->check(CLI::PositiveNumber);

    auto* train_cmd = app.add_subcommand("train", "train a network");
    train_cmd->add_option("--data", o.data, "dataset root")->required();
    train_cmd->add_option("--ckpt", o.ckpt, "checkpoint to write")->required();
    train_cmd->add_option("--curves", o.curves, "relabel with these curves before training");
    train_cmd->add_option("--config", o.train_config, "training config JSON");
    train_cmd->add_option("--net", o.net_config, "network config JSON");
    train_cmd->add_option("--epochs", o.epochs, "override epochs");
    train_cmd->add_option("--lr", o.lr, "override learning rate");
    train_cmd->add_option("--optimizer", o.optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
    train_cmd->add_option("--seed", o.seed, "initialization and shuffling seed");
    train_cmd->add_option("--metrics", o.metrics, "per-epoch NDJSON log");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--data", o.data, "dataset root")->required();
    eval->add_option("--ckpt", o.ckpt, "checkpoint")->required();
    eval->add_option("--report", o.report, "report JSON to write");
    eval->add_option("--split", o.part, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--curves", o.curves, "relabel with these curves first");
    eval->add_option("--bin-width", o.bin_width, "histogram bin width")->check(CLI::PositiveNumber);
    eval->add_option("--conf", o.conf, "detection confidence threshold");
    eval->add_option("--nms", o.nms, "NMS IoU threshold");

    auto* infer = app.add_subcommand("infer", "run a checkpoint on one image");
    infer->add_option("--ckpt", o.ckpt, "checkpoint")->required();
    infer->add_option("--image", o.image, "grayscale PNG")->required();
    infer->add_option("--conf", o.conf, "detection confidence threshold");
    infer->add_option("--nms", o.nms, "NMS IoU threshold");

    auto* serve_cmd = app.add_subcommand("serve", "serve the review API");
    serve_cmd->add_option("--data", o.data, "dataset root")->required();
    serve_cmd->add_option("--curves", o.curves, "deduct curve JSON")->required();
    serve_cmd->add_option("--thresholds", o.thresholds, "severity threshold JSON");
    serve_cmd->add_option("--ckpt", o.ckpt, "checkpoint for /api/infer");
    serve_cmd->add_option("--host", o.host, "bind address");
    serve_cmd->add_option("--port", o.port, "port")->check(CLI::Range(0, 65535));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*synth) return run_synth(o);
        if (*label) return run_label(o);
        if (*stats) return run_stats(o);
        if (*train_cmd) return run_train(o);
        if (*eval) return run_eval(o);
        if (*infer) return run_infer(o);
        if (*serve_cmd) return run_serve(o);
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitData;
    } catch (const GeometryError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const EvalError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
