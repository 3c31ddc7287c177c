#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "image2pci/annotation.hpp"
#include "image2pci/image_io.hpp"
#include "image2pci/model/loss.hpp"
#include "image2pci/model/net.hpp"

namespace i2p {

enum class Optimizer { Sgd, Adam };
enum class LrSchedule { Cosine, Constant };

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double lr = 0.01;
    double lr_final = 0.0;  // cosine end point
    LrSchedule schedule = LrSchedule::Cosine;
    int warmup_steps = 0;
    Optimizer optimizer = Optimizer::Sgd;
    double momentum = 0.9;
    double grad_clip = 0.0;  // global L2 norm; 0 disables
    std::uint64_t seed = 1;
    model::LossWeights weights;
    std::optional<double> anchor_match_iou;
    int max_steps = 0;  // 0: no cap
    int overfit_k = 0;  // > 0: train and validate on the first k training images
    bool hflip = false;

    // Throws ConfigError.
    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

// One image ready for training: pixels, labels and precomputed targets.
struct Example {
    ImageAnnotation annotation;
    GrayImage image;
    model::ImageTargets targets;
};

// Images are read from <root>/images/<image_id>.png and must match the
// annotation's pixel size.
std::vector<Example> load_examples(const std::vector<ImageAnnotation>& annotations, const std::filesystem::path& root,
                                   const model::NetConfig& config, std::optional<double> anchor_match_iou = std::nullopt);

struct EpochMetrics {
    int epoch = 0;
    double l_det1 = 0, l_det2 = 0, l_seg = 0, l_pci = 0, total = 0;
    double val_mape = 0;
    std::optional<double> val_r2;  // absent for fewer than two validation images
    std::string to_json() const;   // one NDJSON line, without the newline
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    int best_epoch = 0;  // 0: the initialization
    double best_val_mape = 0;
    std::size_t steps = 0;
    std::vector<double> step_losses;  // total loss of every step
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Trains `net` in place and leaves it holding the best-by-validation-MAPE
// state. When `checkpoint` is set, that state is written there (with the config
// sidecar) whenever it improves, starting with the initialization. Each epoch's
// metrics go to `metrics_log` as NDJSON. A non-finite loss throws
// TrainingDiverged; the file keeps the last good checkpoint.
TrainResult train(model::Net& net, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                  std::ostream* metrics_log = nullptr);

struct PredictionPair {
    std::string image_id;
    double actual = 0;
    double predicted = 0;
};

struct DetectionSummary {
    std::size_t ground_truth = 0;
    std::size_t predicted = 0;
    std::size_t matched = 0;  // same class, IoU >= 0.5, one-to-one
};

struct EvalReport {
    double r2 = 0;
    double mape_pct = 0;
    std::vector<PredictionPair> pairs;
    std::vector<HistogramBin> histogram;            // actual labels
    std::vector<HistogramBin> predicted_histogram;  // predictions
    double seg_pixel_accuracy = 0;
    DetectionSummary linear, pattern;

    std::string to_json() const;
};

class EvalError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr double kMapeFloor = 1.0;

// 1 - SS_res / SS_tot; throws EvalError for n < 2. A constant target gives 1
// for a perfect prediction and 0 otherwise.
double r_squared(const std::vector<double>& actual, const std::vector<double>& predicted);
// (100 / n) sum |y - yhat| / max(y, kMapeFloor)
double mape_pct(const std::vector<double>& actual, const std::vector<double>& predicted);

// PCI predictions in eval mode, in example order.
std::vector<double> predict_pci(model::Net& net, const std::vector<Example>& examples, int batch_size = 16);

// Throws EvalError for fewer than two examples.
EvalReport evaluate(model::Net& net, const std::vector<Example>& examples, double bin_width = 10.0,
                    double conf_threshold = 0.25, double nms_iou = 0.5);

// Copy of the example mirrored left to right, targets included.
Example hflip(const Example& e, const model::NetConfig& config, std::optional<double> anchor_match_iou);

} // namespace i2p
