#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "malaria/annotations.hpp"
#include "malaria/types.hpp"

namespace malaria {

/// Binary ("infected") in the two-stage flow, stage-valued for the one-stage baseline.
using DetectionLabel = std::variant<InfectionLabel, StageLabel>;

std::string label_to_string(const DetectionLabel& label);
DetectionLabel label_from_string(std::string_view text);

struct Detection {
    BoundingBox bbox;
    double score{0.0};
    DetectionLabel label{InfectionLabel::infected};

    friend bool operator==(const Detection&, const Detection&) = default;
};

enum class ClassMode { binary_infected, multiclass_stage };

std::string_view to_string(ClassMode mode);
ClassMode class_mode_from_string(std::string_view text);

struct DetectorConfig {
    int iterations{15000};
    double score_threshold{0.5};
    double nms_iou_threshold{0.5};
    std::uint64_t seed{0};
    ClassMode class_mode{ClassMode::binary_infected};
};

/// Throws ValidationError when a threshold or the iteration count is out of range.
void validate(const DetectorConfig& config);

struct DetectorModel {
    std::string backend;
    ClassMode class_mode{ClassMode::binary_infected};
    /// iterations, seed, class mode, thresholds and a hash over them.
    nlohmann::json fingerprint;
    /// Backend-owned parameters; opaque to everything else.
    nlohmann::json parameters;
};

/// Ground-truth boxes a detector is trained and scored against.
struct SlideTargets {
    std::string image_id;
    std::string image_path;
    int height{0};
    int width{0};
    std::vector<BoundingBox> boxes;
    std::vector<DetectionLabel> labels;
};

/// Relabel every parasite-stage annotation as `infected`. Uninfected and
/// difficult annotations are dropped; box geometry is untouched.
std::vector<SlideTargets> collapse_to_infected(const std::vector<SlideRecord>& records);

/// Stage-labelled targets for the one-stage baseline (difficult dropped).
std::vector<SlideTargets> stage_targets(const std::vector<SlideRecord>& records);

std::vector<SlideTargets> detector_targets(const std::vector<SlideRecord>& records, ClassMode mode);

/// Training slides plus lazy image access, so backends never hold a whole corpus in memory.
class TrainingCorpus {
public:
    TrainingCorpus(std::vector<SlideTargets> slides, std::filesystem::path image_root)
        : slides_(std::move(slides)), image_root_(std::move(image_root)) {}

    [[nodiscard]] const std::vector<SlideTargets>& slides() const { return slides_; }
    /// BGR 8-bit image of slide i; IoError naming the path if unreadable.
    [[nodiscard]] cv::Mat load(std::size_t i) const;

private:
    std::vector<SlideTargets> slides_;
    std::filesystem::path image_root_;
};

/// Read a slide image as 8-bit BGR. Throws IoError naming the path on failure.
cv::Mat load_slide_image(const std::filesystem::path& path);

class DetectorBackend {
public:
    virtual ~DetectorBackend() = default;

    [[nodiscard]] virtual std::string_view id() const = 0;

    /// Returns the serialized parameters for DetectorModel::parameters.
    /// `options` carries backend-specific settings (weights paths and the like).
    [[nodiscard]] virtual nlohmann::json train(const TrainingCorpus& corpus, const DetectorConfig& config,
                                               const nlohmann::json& options) const = 0;

    /// Raw scored candidates before clipping, thresholding and NMS.
    [[nodiscard]] virtual std::vector<Detection> propose(const DetectorModel& model,
                                                         const cv::Mat& image) const = 0;
};

/// Registered ids: "reference" (color/blob segmenter) and "dnn" (externally
/// trained Faster R-CNN graph run through OpenCV's dnn module).
const DetectorBackend& detector_backend(std::string_view id);

/// Trains on `train` and returns a model stamped with the config fingerprint.
DetectorModel train_detector(const std::vector<SlideRecord>& train,
                             const std::filesystem::path& image_root, const DetectorConfig& config,
                             const DetectorBackend& backend,
                             const nlohmann::json& backend_options = nlohmann::json::object());

/// Scored detections >= score_threshold, clipped to the image, NMS-filtered
/// per label and sorted by descending score (ties keep proposal order).
std::vector<Detection> detect(const DetectorModel& model, const cv::Mat& image,
                              const DetectorConfig& config);

/// The post-processing half of detect(): clip to the image, drop empty boxes,
/// clamp scores, apply the score threshold and per-label NMS, sort by score.
std::vector<Detection> postprocess_detections(const std::vector<Detection>& raw, int image_height, int image_width,
                                              const DetectorConfig& config);

/// Greedy score-descending suppression. Survivors are returned in input
/// order; no two survivors overlap with IoU > iou_threshold. Equal scores
/// are visited in input order.
std::vector<Detection> nms(const std::vector<Detection>& detections, double iou_threshold);

nlohmann::json detections_to_json(const std::string& image_id, const std::vector<Detection>& detections);

nlohmann::json to_json(const DetectorModel& model);
DetectorModel detector_model_from_json(const nlohmann::json& doc);
void save_detector_model(const std::filesystem::path& path, const DetectorModel& model);
DetectorModel load_detector_model(const std::filesystem::path& path);

nlohmann::json to_json(const BoundingBox& box);
BoundingBox bbox_from_json(const nlohmann::json& doc);

} // namespace malaria
