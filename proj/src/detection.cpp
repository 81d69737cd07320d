#include "malaria/detection.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <span>

#include <opencv2/imgcodecs.hpp>

#include "malaria/errors.hpp"
#include "malaria/metrics.hpp"
#include "malaria/rng.hpp"
#include "malaria/taxonomy.hpp"

namespace malaria {

// Defined in reference_detector.cpp / dnn_detector.cpp.
const DetectorBackend& reference_detector_backend();
const DetectorBackend& dnn_detector_backend();

std::string label_to_string(const DetectionLabel& label) {
    return std::visit([](auto l) { return std::string(to_string(l)); }, label);
}

DetectionLabel label_from_string(std::string_view text) {
    if (auto s = parse_stage(text)) return *s;
    if (auto i = parse_infection(text)) return *i;
    throw ValidationError("unknown detection label '" + std::string(text) + "'");
}

std::string_view to_string(ClassMode mode) {
    return mode == ClassMode::binary_infected ? "binary_infected" : "multiclass_stage";
}

ClassMode class_mode_from_string(std::string_view text) {
    if (text == "binary_infected") return ClassMode::binary_infected;
    if (text == "multiclass_stage") return ClassMode::multiclass_stage;
    throw ConfigError("unknown class mode '" + std::string(text) +
                      "' (expected binary_infected or multiclass_stage)");
}

void validate(const DetectorConfig& config) {
    if (config.iterations <= 0) throw ValidationError("detector iterations must be positive");
    if (!(config.score_threshold >= 0.0 && config.score_threshold <= 1.0)) {
        throw ValidationError("detector score_threshold must lie in [0, 1]");
    }
    if (!(config.nms_iou_threshold > 0.0 && config.nms_iou_threshold < 1.0)) {
        throw ValidationError("detector nms_iou_threshold must lie in (0, 1)");
    }
}

std::vector<SlideTargets> detector_targets(const std::vector<SlideRecord>& records, ClassMode mode) {
    std::vector<SlideTargets> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        SlideTargets t{r.image_id, r.image_path, r.height, r.width, {}, {}};
        for (const auto& ann : r.annotations) {
            const auto label = map_taxonomy(ann.category);
            if (label.excluded || label.infection != InfectionLabel::infected) continue;
            t.boxes.push_back(ann.bbox);
            if (mode == ClassMode::binary_infected) {
                t.labels.emplace_back(InfectionLabel::infected);
            } else {
                t.labels.emplace_back(*label.stage);
            }
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<SlideTargets> collapse_to_infected(const std::vector<SlideRecord>& records) {
    return detector_targets(records, ClassMode::binary_infected);
}

std::vector<SlideTargets> stage_targets(const std::vector<SlideRecord>& records) {
    return detector_targets(records, ClassMode::multiclass_stage);
}

cv::Mat load_slide_image(const std::filesystem::path& path) {
    cv::Mat image = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (image.empty()) throw IoError("cannot read image " + path.string());
    return image;
}

cv::Mat TrainingCorpus::load(std::size_t i) const {
    const auto& s = slides_.at(i);
    SlideRecord ref;
    ref.image_path = s.image_path;
    cv::Mat image = load_slide_image(resolve_image_path(image_root_, ref));
    if (image.rows != s.height || image.cols != s.width) {
        throw ValidationError("image " + s.image_id + " is " + std::to_string(image.rows) + "x" +
                              std::to_string(image.cols) + " but annotated as " +
                              std::to_string(s.height) + "x" + std::to_string(s.width));
    }
    return image;
}

const DetectorBackend& detector_backend(std::string_view id) {
    if (id == reference_detector_backend().id()) return reference_detector_backend();
    if (id == dnn_detector_backend().id()) return dnn_detector_backend();
    throw ConfigError("unknown detector backend '" + std::string(id) + "' (expected reference or dnn)");
}

namespace {

nlohmann::json make_fingerprint(const DetectorConfig& config, std::string_view backend) {
    nlohmann::json fp{{"backend", backend},
                      {"class_mode", to_string(config.class_mode)},
                      {"iterations", config.iterations},
                      {"seed", config.seed},
                      {"score_threshold", config.score_threshold},
                      {"nms_iou_threshold", config.nms_iou_threshold}};
    fp["hash"] = fingerprint_hex(fp.dump());
    return fp;
}

} // namespace

DetectorModel train_detector(const std::vector<SlideRecord>& train,
                             const std::filesystem::path& image_root, const DetectorConfig& config,
                             const DetectorBackend& backend, const nlohmann::json& backend_options) {
    validate(config);
    if (train.empty()) throw ValidationError("train_detector: empty training set");

    TrainingCorpus corpus(detector_targets(train, config.class_mode), image_root);
    DetectorModel model;
    model.backend = std::string(backend.id());
    model.class_mode = config.class_mode;
    model.fingerprint = make_fingerprint(config, backend.id());
    model.parameters = backend.train(corpus, config, backend_options);
    return model;
}

namespace {

std::vector<std::size_t> nms_indices(const std::vector<Detection>& detections,
                                     std::span<const std::size_t> candidates, double iou_threshold) {
    std::vector<std::size_t> order(candidates.begin(), candidates.end());
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].score > detections[b].score;
    });
    std::vector<std::size_t> kept;
    for (auto i : order) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
            return iou(detections[i].bbox, detections[k].bbox) > iou_threshold;
        });
        if (!suppressed) kept.push_back(i);
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

} // namespace

std::vector<Detection> nms(const std::vector<Detection>& detections, double iou_threshold) {
    std::vector<std::size_t> all(detections.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<Detection> out;
    for (auto i : nms_indices(detections, all, iou_threshold)) out.push_back(detections[i]);
    return out;
}

std::vector<Detection> detect(const DetectorModel& model, const cv::Mat& image,
                              const DetectorConfig& config) {
    validate(config);
    if (image.empty() || image.type() != CV_8UC3) {
        throw ValidationError("detect: expected a non-empty 8-bit 3-channel image");
    }
    return postprocess_detections(detector_backend(model.backend).propose(model, image), image.rows, image.cols,
                                  config);
}

std::vector<Detection> postprocess_detections(const std::vector<Detection>& raw, int image_height, int image_width,
                                              const DetectorConfig& config) {
    validate(config);
    // Clip, drop empty boxes, threshold, then suppress within each label.
    std::vector<Detection> candidates;
    for (auto d : raw) {
        d.bbox = d.bbox.clipped_to(image_height, image_width);
        if (!d.bbox.is_valid()) continue;
        d.score = std::clamp(d.score, 0.0, 1.0);
        if (d.score < config.score_threshold) continue;
        candidates.push_back(d);
    }

    std::vector<DetectionLabel> labels;
    for (const auto& d : candidates) {
        if (std::find(labels.begin(), labels.end(), d.label) == labels.end()) labels.push_back(d.label);
    }
    std::vector<std::size_t> survivors;
    for (const auto& label : labels) {
        std::vector<std::size_t> group;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            if (candidates[i].label == label) group.push_back(i);
        }
        const auto kept = nms_indices(candidates, group, config.nms_iou_threshold);
        survivors.insert(survivors.end(), kept.begin(), kept.end());
    }
    std::sort(survivors.begin(), survivors.end());

    std::vector<Detection> out;
    out.reserve(survivors.size());
    for (auto i : survivors) out.push_back(candidates[i]);
    std::stable_sort(out.begin(), out.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    return out;
}

nlohmann::json to_json(const BoundingBox& box) {
    return {{"min_row", box.min_row}, {"min_col", box.min_col}, {"max_row", box.max_row},
            {"max_col", box.max_col}};
}

BoundingBox bbox_from_json(const nlohmann::json& doc) {
    return {doc.at("min_row").get<int>(), doc.at("min_col").get<int>(), doc.at("max_row").get<int>(),
            doc.at("max_col").get<int>()};
}

nlohmann::json detections_to_json(const std::string& image_id, const std::vector<Detection>& detections) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& d : detections) {
        out.push_back({{"image_id", image_id},
                       {"bbox", to_json(d.bbox)},
                       {"score", d.score},
                       {"label", label_to_string(d.label)}});
    }
    return out;
}

nlohmann::json to_json(const DetectorModel& model) {
    return {{"format", "malaria-detector"},
            {"version", 1},
            {"backend", model.backend},
            {"class_mode", to_string(model.class_mode)},
            {"fingerprint", model.fingerprint},
            {"parameters", model.parameters}};
}

DetectorModel detector_model_from_json(const nlohmann::json& doc) {
    try {
        if (doc.at("format") != "malaria-detector") throw ParseError("not a detector model file");
        if (doc.at("version").get<int>() != 1) {
            throw ParseError("unsupported detector model version " + doc.at("version").dump());
        }
        DetectorModel model;
        model.backend = doc.at("backend").get<std::string>();
        model.class_mode = class_mode_from_string(doc.at("class_mode").get<std::string>());
        model.fingerprint = doc.at("fingerprint");
        model.parameters = doc.at("parameters");
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed detector model: ") + e.what());
    }
}

void save_detector_model(const std::filesystem::path& path, const DetectorModel& model) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write detector model " + path.string());
    out << to_json(model).dump(1) << '\n';
}

DetectorModel load_detector_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read detector model " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return detector_model_from_json(doc);
}

} // namespace malaria
