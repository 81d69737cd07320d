#include <fstream>
#include <set>

#include "malaria/errors.hpp"
#include "malaria/pipeline.hpp"
#include "malaria/rng.hpp"

namespace malaria {

namespace {

void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.contains(key)) throw ConfigError("unknown config key '" + where + key + "'");
    }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    if (p.empty()) return {};
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
void read(const nlohmann::json& obj, const char* key, T& target, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        target = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + where + key + "' has the wrong type");
    }
}

} // namespace

PipelineConfig pipeline_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
    reject_unknown(doc,
                   {"annotations", "image_root", "detector_backend", "detector_weights", "detector_graph_config",
                    "feature_backend", "feature_weights", "detector", "classifier", "crop_size", "balance_cap",
                    "train_fraction", "seed", "eval_iou_threshold", "output_dir"},
                   "");
    PipelineConfig c;
    std::string annotations, image_root, det_weights, det_graph, feat_weights, output_dir = "out";
    read(doc, "annotations", annotations, "");
    read(doc, "image_root", image_root, "");
    read(doc, "detector_backend", c.detector_backend, "");
    read(doc, "detector_weights", det_weights, "");
    read(doc, "detector_graph_config", det_graph, "");
    read(doc, "feature_backend", c.feature_backend, "");
    read(doc, "feature_weights", feat_weights, "");
    read(doc, "crop_size", c.crop_size, "");
    read(doc, "balance_cap", c.balance_cap, "");
    read(doc, "train_fraction", c.train_fraction, "");
    read(doc, "seed", c.seed, "");
    read(doc, "eval_iou_threshold", c.eval_iou_threshold, "");
    read(doc, "output_dir", output_dir, "");
    c.annotations = resolve(base_dir, annotations);
    c.image_root = resolve(base_dir, image_root);
    c.detector_weights = resolve(base_dir, det_weights);
    c.detector_graph_config = resolve(base_dir, det_graph);
    c.feature_weights = resolve(base_dir, feat_weights);
    c.output_dir = resolve(base_dir, output_dir);

    if (doc.contains("detector")) {
        const auto& d = doc["detector"];
        reject_unknown(d, {"iterations", "score_threshold", "nms_iou_threshold", "seed", "class_mode"}, "detector.");
        read(d, "iterations", c.detector.iterations, "detector.");
        read(d, "score_threshold", c.detector.score_threshold, "detector.");
        read(d, "nms_iou_threshold", c.detector.nms_iou_threshold, "detector.");
        read(d, "seed", c.detector.seed, "detector.");
        std::string mode(to_string(c.detector.class_mode));
        read(d, "class_mode", mode, "detector.");
        c.detector.class_mode = class_mode_from_string(mode);
    }
    if (doc.contains("classifier")) {
        const auto& k = doc["classifier"];
        reject_unknown(k, {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "patience",
                           "min_delta", "seed"},
                       "classifier.");
        read(k, "epochs", c.classifier.epochs, "classifier.");
        read(k, "batch_size", c.classifier.batch_size, "classifier.");
        read(k, "learning_rate", c.classifier.learning_rate, "classifier.");
        read(k, "momentum", c.classifier.momentum, "classifier.");
        read(k, "weight_decay", c.classifier.weight_decay, "classifier.");
        read(k, "patience", c.classifier.patience, "classifier.");
        read(k, "min_delta", c.classifier.min_delta, "classifier.");
        read(k, "seed", c.classifier.seed, "classifier.");
    }
    return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    return pipeline_config_from_json(doc, path.parent_path());
}

nlohmann::json to_json(const PipelineConfig& c) {
    return {{"annotations", c.annotations.string()},
            {"image_root", c.image_root.string()},
            {"detector_backend", c.detector_backend},
            {"detector_weights", c.detector_weights.string()},
            {"detector_graph_config", c.detector_graph_config.string()},
            {"feature_backend", c.feature_backend},
            {"feature_weights", c.feature_weights.string()},
            {"detector",
             {{"iterations", c.detector.iterations},
              {"score_threshold", c.detector.score_threshold},
              {"nms_iou_threshold", c.detector.nms_iou_threshold},
              {"seed", c.detector.seed},
              {"class_mode", to_string(c.detector.class_mode)}}},
            {"classifier", to_json(c.classifier)},
            {"crop_size", c.crop_size},
            {"balance_cap", c.balance_cap},
            {"train_fraction", c.train_fraction},
            {"seed", c.seed},
            {"eval_iou_threshold", c.eval_iou_threshold},
            {"output_dir", c.output_dir.string()}};
}

void validate(const PipelineConfig& c, bool check_paths) {
    try {
        validate(c.detector);
        validate(c.classifier);
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
    if (c.balance_cap == 0) throw ConfigError("balance_cap must be positive");
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    if (!(c.eval_iou_threshold > 0.0 && c.eval_iou_threshold < 1.0)) {
        throw ConfigError("eval_iou_threshold must lie in (0, 1)");
    }
    if (c.crop_size <= 0) throw ConfigError("crop_size must be positive");
    if (c.detector_backend != "reference" && c.detector_backend != "dnn") {
        throw ConfigError("unknown detector_backend '" + c.detector_backend + "'");
    }
    if (c.feature_backend != "reference" && c.feature_backend != "resnet50") {
        throw ConfigError("unknown feature_backend '" + c.feature_backend + "'");
    }
    if (!check_paths) return;
    if (c.annotations.empty()) throw ConfigError("config is missing 'annotations'");
    if (!std::filesystem::exists(c.annotations)) {
        throw IoError("annotation file " + c.annotations.string() + " does not exist");
    }
    if (!c.image_root.empty() && !std::filesystem::is_directory(c.image_root)) {
        throw IoError("image_root " + c.image_root.string() + " is not a directory");
    }
}

std::string config_fingerprint(const PipelineConfig& config) {
    auto doc = to_json(config);
    doc.erase("output_dir");
    return fingerprint_hex(doc.dump());
}

std::filesystem::path image_root_for(const PipelineConfig& config) {
    return config.image_root.empty() ? config.annotations.parent_path() : config.image_root;
}

} // namespace malaria
