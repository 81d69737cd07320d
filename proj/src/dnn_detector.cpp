// Production detector backend: a Faster R-CNN graph (region proposal network
// over a pretrained convolutional backbone) executed with OpenCV's dnn module.
//
// Training the network itself happens outside this toolkit with the usual
// object-detection tooling; `train` validates and records the exported
// weights, so the resulting DetectorModel carries the same header and
// fingerprint as every other backend.

#include <filesystem>

#include <opencv2/dnn.hpp>

#include "malaria/detection.hpp"
#include "malaria/errors.hpp"

namespace malaria {

namespace {

constexpr const char* kRemediation =
    "export a Faster R-CNN trained on the collapsed 'infected' class (or on the four stages for "
    "multiclass_stage) as a frozen graph or ONNX file and set detector_weights in the config";

class DnnDetectorBackend final : public DetectorBackend {
public:
    std::string_view id() const override { return "dnn"; }

    nlohmann::json train(const TrainingCorpus& corpus, const DetectorConfig& config,
                         const nlohmann::json& options) const override {
        const std::string weights = options.value("weights", std::string{});
        if (weights.empty()) throw ConfigError(std::string("dnn detector: no weights given; ") + kRemediation);
        if (!std::filesystem::exists(weights)) {
            throw ConfigError("dnn detector: weights file " + weights + " not found; " + kRemediation);
        }
        const std::string graph = options.value("graph_config", std::string{});
        try {
            (void)cv::dnn::readNet(weights, graph);
        } catch (const cv::Exception& e) {
            throw ConfigError("dnn detector: cannot load " + weights + ": " + e.what());
        }
        return {{"weights", weights},
                {"graph_config", graph},
                {"input_width", options.value("input_width", 800)},
                {"input_height", options.value("input_height", 600)},
                {"training_slides", corpus.slides().size()},
                {"class_mode", to_string(config.class_mode)}};
    }

    std::vector<Detection> propose(const DetectorModel& model, const cv::Mat& image) const override {
        const auto& p = model.parameters;
        const std::string weights = p.value("weights", std::string{});
        if (!std::filesystem::exists(weights)) {
            throw ConfigError("dnn detector: weights file " + weights + " not found; " + kRemediation);
        }
        cv::dnn::Net net = cv::dnn::readNet(weights, p.value("graph_config", std::string{}));
        const cv::Size size(p.value("input_width", 800), p.value("input_height", 600));
        net.setInput(cv::dnn::blobFromImage(image, 1.0, size, cv::Scalar(), true, false));
        const cv::Mat out = net.forward();

        // DetectionOutput layout: [1, 1, N, 7] = (batch, class, score, x1, y1, x2, y2), coords normalized.
        if (out.dims != 4 || out.size[3] != 7) {
            throw ConfigError("dnn detector: unexpected output layout; expected a DetectionOutput blob");
        }
        const cv::Mat rows(out.size[2], 7, CV_32F, const_cast<float*>(out.ptr<float>()));
        std::vector<Detection> dets;
        for (int i = 0; i < rows.rows; ++i) {
            const float* d = rows.ptr<float>(i);
            const int cls = static_cast<int>(d[1]);
            DetectionLabel label = InfectionLabel::infected;
            if (model.class_mode == ClassMode::multiclass_stage) {
                // Class ids 1..4 follow the canonical stage order; 0 is background.
                if (cls < 1 || cls > static_cast<int>(kNumStages)) continue;
                label = kStageOrder[static_cast<std::size_t>(cls - 1)];
            } else if (cls < 1) {
                continue;
            }
            const BoundingBox box{static_cast<int>(std::floor(d[4] * image.rows)),
                                  static_cast<int>(std::floor(d[3] * image.cols)),
                                  static_cast<int>(std::ceil(d[6] * image.rows)),
                                  static_cast<int>(std::ceil(d[5] * image.cols))};
            dets.push_back({box, static_cast<double>(d[2]), label});
        }
        return dets;
    }
};

} // namespace

const DetectorBackend& dnn_detector_backend() {
    static const DnnDetectorBackend backend;
    return backend;
}

} // namespace malaria
