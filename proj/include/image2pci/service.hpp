#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "image2pci/annotation.hpp"
#include "image2pci/geometry.hpp"
#include "image2pci/image_io.hpp"
#include "image2pci/model/net.hpp"
#include "image2pci/pci.hpp"

namespace i2p {

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;
};

// Request handling for the review API, independent of any socket layer.
// Dataset, thresholds, curves and model are fixed at construction; inference is
// serialized through one mutex.
class Service {
public:
    Service(std::filesystem::path data_root, std::vector<ImageAnnotation> dataset, SeverityThresholds thresholds,
            DeductCurveSet curves, std::optional<model::Net> net = std::nullopt, bool cors = true);

    // Loads the dataset under `data_root` and, when given, the checkpoint.
    static Service open(const std::filesystem::path& data_root, const std::filesystem::path& curves,
                        const std::optional<std::filesystem::path>& thresholds,
                        const std::optional<std::filesystem::path>& checkpoint, bool cors = true);

    HttpResponse handle(const std::string& method, const std::string& path, const std::string& body) const;

    bool has_model() const noexcept { return net_ != nullptr; }
    // Label served for an image; nullopt when the image cannot be labeled.
    std::optional<double> pci_label(const std::string& image_id) const;

private:
    struct Entry {
        ImageAnnotation annotation;
        std::optional<PciReport> report;
        std::string label_error;
    };

    HttpResponse images() const;
    HttpResponse image_file(const Entry& e) const;
    HttpResponse annotations(const Entry& e) const;
    HttpResponse measure(const std::string& body) const;
    HttpResponse severity(const std::string& body) const;
    HttpResponse pci(const std::string& body) const;
    HttpResponse infer(const std::string& body) const;
    const Entry* find(const std::string& id) const;
    HttpResponse finish(HttpResponse r) const;

    std::filesystem::path root_;
    std::map<std::string, Entry> entries_;
    SeverityThresholds thresholds_;
    DeductCurveSet curves_;
    std::unique_ptr<model::Net> net_;
    mutable std::mutex infer_mutex_;
    bool cors_;
};

// Row-major [start, length, ...] runs of ones.
std::vector<std::size_t> run_length_encode(const std::vector<std::uint8_t>& bits);

// The /api/infer response body for one image; the image must match the network input.
std::string infer_json(model::Net& net, const GrayImage& image, double conf_threshold = 0.25, double nms_iou = 0.5);

// PciReport as the JSON object served by /api/pci.
std::string pci_report_json(const PciReport& report);

// Socket front end for a Service. Port 0 binds an ephemeral port.
class HttpServer {
public:
    explicit HttpServer(const Service& service);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Returns the bound port; throws std::runtime_error on failure.
    int bind(const std::string& host, int port);
    // Blocks until stop() is called from another thread.
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Cross-origin headers are meant for local development only.
bool is_loopback_host(const std::string& host);

// Blocks serving `service` until the process is stopped.
void serve(const Service& service, const std::string& host, int port);

} // namespace i2p
