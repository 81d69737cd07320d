#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "malaria/detection.hpp"
#include "malaria/types.hpp"

namespace malaria {

/// Intersection over union under the max-exclusive convention.
double iou(const BoundingBox& a, const BoundingBox& b);

struct MatchResult {
    std::vector<bool> detection_is_tp;
    std::vector<std::optional<std::size_t>> detection_matched_gt;
    std::vector<bool> gt_matched;
    double iou_threshold{0.5};

    [[nodiscard]] std::size_t true_positives() const;
    [[nodiscard]] std::size_t false_positives() const;
    [[nodiscard]] std::size_t missed() const;
};

/// Detections are visited by descending score (ties by input order); each
/// claims the unmatched ground truth of highest IoU (lowest index on ties)
/// if that IoU reaches the threshold, otherwise it is a false positive.
MatchResult match_detections(std::span<const Detection> detections,
                             std::span<const BoundingBox> ground_truths, double iou_threshold);

struct PRPoint {
    double recall{0.0};
    double precision{0.0};
};

/// Ordered by descending score cutoff; recall is non-decreasing.
using PRCurve = std::vector<PRPoint>;

/// One image's detections and ground truths, for corpus-level evaluation.
struct ImageEvaluation {
    std::vector<Detection> detections;
    std::vector<BoundingBox> ground_truths;
};

PRCurve pr_curve(std::span<const ImageEvaluation> images, double iou_threshold);

/// All-point interpolated AP. Detections are matched within their own image
/// and then ranked jointly by score (ties by image order, then input order).
/// No ground truths: 1.0 when there are also no detections, else 0.0.
double average_precision(std::span<const ImageEvaluation> images, double iou_threshold);
double average_precision(std::span<const Detection> detections,
                         std::span<const BoundingBox> ground_truths, double iou_threshold);

/// Area under the monotone-interpolated staircase of a PR curve.
double interpolated_area(const PRCurve& curve);

/// Unweighted mean; throws ValidationError for an empty input.
double mean_average_precision(std::span<const double> per_class_ap);

/// TP / #ground truths; 1.0 when there are no ground truths.
double detection_recall(const MatchResult& match);
double detection_recall(std::span<const ImageEvaluation> images, double iou_threshold);

using ConfusionMatrix = std::array<std::array<std::size_t, kNumStages>, kNumStages>;

struct ClassMetrics {
    double precision{0.0};
    double recall{0.0};
    double f1{0.0};
    std::size_t support{0};
};

struct ClassificationReport {
    std::array<ClassMetrics, kNumStages> per_class{};
    ClassMetrics macro_avg;
    ClassMetrics weighted_avg;
    double accuracy{0.0};
    ConfusionMatrix confusion{};
    std::size_t total{0};
};

/// 2PR/(P+R), or 0 when P+R is 0.
double f1_score(double precision, double recall);

ConfusionMatrix confusion_matrix(std::span<const StageLabel> truths, std::span<const StageLabel> preds);
ClassificationReport classification_report(std::span<const StageLabel> truths,
                                           std::span<const StageLabel> preds);
/// String labels; unknown names raise ValidationError.
ClassificationReport classification_report(std::span<const std::string> truths,
                                           std::span<const std::string> preds);

/// Fixed two-decimal rendering.
std::string format_metric(double value);

/// Plain-text table: class rows in canonical order, macro and weighted rows,
/// then the accuracy line.
std::string render_report(const ClassificationReport& report);
nlohmann::json to_json(const ClassificationReport& report);

struct DetectionEvaluation {
    std::vector<std::pair<std::string, double>> per_class_ap;
    double map{0.0};
    double recall{0.0};
    double iou_threshold{0.5};
};

nlohmann::json to_json(const DetectionEvaluation& evaluation);

} // namespace malaria
