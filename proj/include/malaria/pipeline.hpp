#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "malaria/classifier.hpp"
#include "malaria/dataset.hpp"
#include "malaria/detection.hpp"
#include "malaria/features.hpp"

namespace malaria {

/// Declarative experiment config. Loaded from a single JSON file whose keys
/// are exactly the ones written by to_json; unknown keys are rejected.
struct PipelineConfig {
    std::filesystem::path annotations;
    /// Directory image pathnames are resolved against; defaults to the
    /// directory holding the annotation file.
    std::filesystem::path image_root;
    std::string detector_backend{"reference"};
    std::filesystem::path detector_weights;
    std::filesystem::path detector_graph_config;
    std::string feature_backend{"reference"};
    std::filesystem::path feature_weights;
    DetectorConfig detector;
    ClassifierTrainingConfig classifier;
    int crop_size{kDefaultCropSize};
    std::size_t balance_cap{140};
    double train_fraction{0.9};
    /// Seeds slide splitting, balancing and the crop split.
    std::uint64_t seed{0};
    double eval_iou_threshold{0.5};
    std::filesystem::path output_dir{"out"};
};

/// Relative paths in the document resolve against `base_dir`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& doc,
                                         const std::filesystem::path& base_dir = {});
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& config);

/// Range checks, plus existence of the referenced paths when `check_paths`.
void validate(const PipelineConfig& config, bool check_paths = true);

/// Hash of the canonical config JSON; stamped on every artifact.
std::string config_fingerprint(const PipelineConfig& config);

std::filesystem::path image_root_for(const PipelineConfig& config);

struct ReportEntry {
    BoundingBox bbox;
    double detector_score{0.0};
    std::array<double, kNumStages> stage_probabilities{};
    StageLabel stage{StageLabel::gametocyte};
    /// "classifier" in the two-stage flow, "detector" in the one-stage baseline.
    std::string provenance;
};

struct CropFailure {
    BoundingBox bbox;
    double detector_score{0.0};
    std::string reason;
};

struct SlideReport {
    std::string image_id;
    std::string mode;
    std::size_t infected_cell_count{0};
    StageCounts per_stage_counts{};
    std::vector<ReportEntry> entries;
    std::vector<CropFailure> failures;
    std::string config_fingerprint;
};

nlohmann::json to_json(const SlideReport& report);
SlideReport slide_report_from_json(const nlohmann::json& doc);

/// detect -> extract_crop -> extract_features -> classify_crop for every
/// detection. Crops that fail are listed in `failures`, not thrown.
SlideReport run_two_stage(const cv::Mat& image, const std::string& image_id, const DetectorModel& detector,
                          const ClassifierModel& classifier, const FeatureBackend& features,
                          const PipelineConfig& config);

/// Stage labels straight from a multiclass detector.
SlideReport run_one_stage(const cv::Mat& image, const std::string& image_id, const DetectorModel& detector,
                          const PipelineConfig& config);

/// Stage-labelled detections from a report, scored by detector score times
/// the probability of the reported stage.
std::vector<Detection> stage_detections(const SlideReport& report);

enum class ExperimentMode { two_stage, one_stage, compare };

std::string_view to_string(ExperimentMode mode);
ExperimentMode experiment_mode_from_string(std::string_view text);

struct ModeMetrics {
    std::string mode;
    double map{0.0};
    double recall{0.0};
};

struct ExperimentSummary {
    std::filesystem::path output_dir;
    std::string fingerprint;
    /// Content of metrics.json.
    nlohmann::json metrics;
    std::vector<ModeMetrics> comparison;
    std::optional<double> detection_map;
    std::optional<double> stage_accuracy;
};

/// ingest -> split/collapse/balance -> train -> evaluate, writing every
/// artifact under config.output_dir. A failing stage leaves status.json
/// flagged incomplete and rethrows with the stage named.
ExperimentSummary run_experiment(const PipelineConfig& config, ExperimentMode mode);

/// Text table with one row per {mode, mAP, recall}.
std::string render_comparison(const std::vector<ModeMetrics>& rows);

/// Loads every slide image referenced by the dataset once and computes
/// crop features in dataset order.
std::vector<FeatureVector> dataset_features(const ClassifierDataset& dataset,
                                            const std::vector<SlideRecord>& records,
                                            const std::filesystem::path& image_root,
                                            const FeatureBackend& backend);

struct SlideSplit {
    std::vector<SlideRecord> train;
    std::vector<SlideRecord> test;
};

/// Seeded slide-level partition with floor(train_fraction * n) training
/// slides (at least one on each side). Input order is kept within each part.
SlideSplit split_slides(const std::vector<SlideRecord>& records, double train_fraction, std::uint64_t seed);

/// Audit export: one PNG per dataset item named {image_id}_{index}_{label}.png.
void export_crops(const ClassifierDataset& dataset, const std::vector<SlideRecord>& records,
                  const std::filesystem::path& image_root, int crop_size, const std::filesystem::path& out_dir);

} // namespace malaria
