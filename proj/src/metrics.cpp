#include "malaria/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "malaria/errors.hpp"

namespace malaria {

double iou(const BoundingBox& a, const BoundingBox& b) {
    const std::int64_t rows = std::min(a.max_row, b.max_row) - std::max(a.min_row, b.min_row);
    const std::int64_t cols = std::min(a.max_col, b.max_col) - std::max(a.min_col, b.min_col);
    const std::int64_t inter = (rows > 0 && cols > 0) ? rows * cols : 0;
    const std::int64_t uni = a.area() + b.area() - inter;
    if (uni <= 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t MatchResult::true_positives() const {
    return static_cast<std::size_t>(std::count(detection_is_tp.begin(), detection_is_tp.end(), true));
}

std::size_t MatchResult::false_positives() const { return detection_is_tp.size() - true_positives(); }

std::size_t MatchResult::missed() const {
    return static_cast<std::size_t>(std::count(gt_matched.begin(), gt_matched.end(), false));
}

namespace {

std::vector<std::size_t> score_order(std::span<const Detection> detections) {
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].score > detections[b].score;
    });
    return order;
}

} // namespace

MatchResult match_detections(std::span<const Detection> detections,
                             std::span<const BoundingBox> ground_truths, double iou_threshold) {
    MatchResult result;
    result.iou_threshold = iou_threshold;
    result.detection_is_tp.assign(detections.size(), false);
    result.detection_matched_gt.assign(detections.size(), std::nullopt);
    result.gt_matched.assign(ground_truths.size(), false);

    for (auto d : score_order(detections)) {
        std::optional<std::size_t> best;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < ground_truths.size(); ++g) {
            if (result.gt_matched[g]) continue;
            const double v = iou(detections[d].bbox, ground_truths[g]);
            if (v > best_iou) {
                best_iou = v;
                best = g;
            }
        }
        if (best && best_iou >= iou_threshold) {
            result.detection_is_tp[d] = true;
            result.detection_matched_gt[d] = best;
            result.gt_matched[*best] = true;
        }
    }
    return result;
}

PRCurve pr_curve(std::span<const ImageEvaluation> images, double iou_threshold) {
    struct Ranked {
        double score;
        bool tp;
    };
    std::vector<Ranked> ranked;
    std::size_t total_gts = 0;
    for (const auto& image : images) {
        const auto match = match_detections(image.detections, image.ground_truths, iou_threshold);
        for (auto d : score_order(image.detections)) {
            ranked.push_back({image.detections[d].score, static_cast<bool>(match.detection_is_tp[d])});
        }
        total_gts += image.ground_truths.size();
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    PRCurve curve;
    curve.reserve(ranked.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        if (ranked[i].tp) ++tp;
        const double recall = total_gts ? static_cast<double>(tp) / static_cast<double>(total_gts) : 0.0;
        curve.push_back({recall, static_cast<double>(tp) / static_cast<double>(i + 1)});
    }
    return curve;
}

double interpolated_area(const PRCurve& curve) {
    double area = 0.0;
    double running_max = 0.0;
    // Walk backwards so each point sees the best precision at recall >= its own.
    for (std::size_t i = curve.size(); i-- > 0;) {
        running_max = std::max(running_max, curve[i].precision);
        const double prev_recall = i == 0 ? 0.0 : curve[i - 1].recall;
        area += (curve[i].recall - prev_recall) * running_max;
    }
    return std::clamp(area, 0.0, 1.0);
}

double average_precision(std::span<const ImageEvaluation> images, double iou_threshold) {
    std::size_t gts = 0;
    std::size_t dets = 0;
    for (const auto& image : images) {
        gts += image.ground_truths.size();
        dets += image.detections.size();
    }
    if (gts == 0) return dets == 0 ? 1.0 : 0.0;
    return interpolated_area(pr_curve(images, iou_threshold));
}

double average_precision(std::span<const Detection> detections,
                         std::span<const BoundingBox> ground_truths, double iou_threshold) {
    const ImageEvaluation single{{detections.begin(), detections.end()},
                                 {ground_truths.begin(), ground_truths.end()}};
    return average_precision(std::span<const ImageEvaluation>(&single, 1), iou_threshold);
}

double mean_average_precision(std::span<const double> per_class_ap) {
    if (per_class_ap.empty()) throw ValidationError("mean_average_precision: no classes");
    return std::accumulate(per_class_ap.begin(), per_class_ap.end(), 0.0) /
           static_cast<double>(per_class_ap.size());
}

double detection_recall(const MatchResult& match) {
    if (match.gt_matched.empty()) return 1.0;
    return static_cast<double>(match.true_positives()) / static_cast<double>(match.gt_matched.size());
}

double detection_recall(std::span<const ImageEvaluation> images, double iou_threshold) {
    std::size_t tp = 0;
    std::size_t gts = 0;
    for (const auto& image : images) {
        tp += match_detections(image.detections, image.ground_truths, iou_threshold).true_positives();
        gts += image.ground_truths.size();
    }
    return gts == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(gts);
}

double f1_score(double precision, double recall) {
    const double denom = precision + recall;
    return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

ConfusionMatrix confusion_matrix(std::span<const StageLabel> truths, std::span<const StageLabel> preds) {
    if (truths.size() != preds.size()) {
        throw ValidationError("classification: " + std::to_string(truths.size()) + " truths vs " +
                              std::to_string(preds.size()) + " predictions");
    }
    ConfusionMatrix m{};
    for (std::size_t i = 0; i < truths.size(); ++i) ++m[stage_index(truths[i])][stage_index(preds[i])];
    return m;
}

ClassificationReport classification_report(std::span<const StageLabel> truths,
                                           std::span<const StageLabel> preds) {
    if (truths.empty()) throw ValidationError("classification_report: empty input");
    ClassificationReport report;
    report.confusion = confusion_matrix(truths, preds);
    report.total = truths.size();
    const auto n = static_cast<double>(report.total);

    std::size_t trace = 0;
    for (std::size_t k = 0; k < kNumStages; ++k) {
        std::size_t tp = report.confusion[k][k];
        std::size_t row = 0;
        std::size_t col = 0;
        for (std::size_t j = 0; j < kNumStages; ++j) {
            row += report.confusion[k][j];
            col += report.confusion[j][k];
        }
        auto& m = report.per_class[k];
        m.support = row;
        m.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
        m.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        m.f1 = f1_score(m.precision, m.recall);
        trace += tp;
    }
    report.accuracy = static_cast<double>(trace) / n;

    for (const auto& m : report.per_class) {
        report.macro_avg.precision += m.precision / kNumStages;
        report.macro_avg.recall += m.recall / kNumStages;
        report.macro_avg.f1 += m.f1 / kNumStages;
    }
    // Support-weighted recall reduces to trace/total.
    double wp = 0.0;
    double wf = 0.0;
    for (const auto& m : report.per_class) {
        wp += m.precision * static_cast<double>(m.support);
        wf += m.f1 * static_cast<double>(m.support);
    }
    report.weighted_avg.precision = wp / n;
    report.weighted_avg.recall = report.accuracy;
    report.weighted_avg.f1 = wf / n;
    report.macro_avg.support = report.total;
    report.weighted_avg.support = report.total;
    return report;
}

ClassificationReport classification_report(std::span<const std::string> truths,
                                           std::span<const std::string> preds) {
    auto convert = [](std::span<const std::string> names) {
        std::vector<StageLabel> out;
        out.reserve(names.size());
        for (const auto& name : names) {
            const auto s = parse_stage(name);
            if (!s) throw ValidationError("classification_report: unknown label '" + name + "'");
            out.push_back(*s);
        }
        return out;
    };
    const auto t = convert(truths);
    const auto p = convert(preds);
    return classification_report(t, p);
}

std::string format_metric(double value) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", value);
    return buf;
}

std::string render_report(const ClassificationReport& report) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof line, "%-14s %9s %9s %9s %9s\n", "", "precision", "recall", "f1-score",
                  "support");
    out << line << '\n';
    for (auto s : kStageOrder) {
        const auto& m = report.per_class[stage_index(s)];
        std::snprintf(line, sizeof line, "%-14s %9s %9s %9s %9zu\n", std::string(display_name(s)).c_str(),
                      format_metric(m.precision).c_str(), format_metric(m.recall).c_str(),
                      format_metric(m.f1).c_str(), m.support);
        out << line;
    }
    out << '\n';
    auto avg_row = [&](const char* name, const ClassMetrics& m) {
        std::snprintf(line, sizeof line, "%-14s %9s %9s %9s %9zu\n", name, format_metric(m.precision).c_str(),
                      format_metric(m.recall).c_str(), format_metric(m.f1).c_str(), m.support);
        out << line;
    };
    avg_row("Macro avg", report.macro_avg);
    avg_row("Weighted avg", report.weighted_avg);
    out << '\n';
    std::snprintf(line, sizeof line, "%-14s %9s %9s %9s %9zu\n", "Accuracy", "", "",
                  format_metric(report.accuracy).c_str(), report.total);
    out << line;
    return out.str();
}

nlohmann::json to_json(const ClassificationReport& report) {
    auto metrics = [](const ClassMetrics& m) {
        return nlohmann::json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1},
                              {"support", m.support}};
    };
    nlohmann::json per_class = nlohmann::json::object();
    for (auto s : kStageOrder) per_class[std::string(to_string(s))] = metrics(report.per_class[stage_index(s)]);
    nlohmann::json confusion = nlohmann::json::array();
    for (const auto& row : report.confusion) confusion.push_back(row);
    return {{"per_class", per_class},
            {"macro_avg", metrics(report.macro_avg)},
            {"weighted_avg", metrics(report.weighted_avg)},
            {"accuracy", report.accuracy},
            {"confusion_matrix", confusion},
            {"class_order", {"gametocyte", "ring", "schizont", "trophozoite"}}};
}

nlohmann::json to_json(const DetectionEvaluation& evaluation) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [name, ap] : evaluation.per_class_ap) per_class[name] = ap;
    return {{"per_class_ap", per_class},
            {"map", evaluation.map},
            {"recall", evaluation.recall},
            {"iou_threshold", evaluation.iou_threshold}};
}

} // namespace malaria
