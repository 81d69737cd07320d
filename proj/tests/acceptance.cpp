// Acceptance checks: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "malaria/annotations.hpp"
#include "malaria/dataset.hpp"
#include "malaria/metrics.hpp"
#include "malaria/pipeline.hpp"
#include "malaria/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace malaria;

namespace {

struct Outcome {
    bool ok{true};
    std::ostringstream detail;

    void require(bool condition, const std::string& what) {
        if (!condition && ok) detail << "first failure: " << what << "; ";
        ok = ok && condition;
    }
};

double cpu_seconds(std::clock_t start) {
    return static_cast<double>(std::clock() - start) / CLOCKS_PER_SEC;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Detection random_detection(Rng& rng, int extent, int max_side) {
    return {oracle::random_box(rng, extent, max_side), rng.uniform01(), InfectionLabel::infected};
}

/// 200 default slides, generated once and shared by the dataset and
/// end-to-end criteria.
struct Corpus {
    testutil::TempDir dir{"acceptance"};
    std::filesystem::path annotations;
    std::vector<SlideRecord> records;

    Corpus() {
        annotations = generate_corpus(200, default_synth_spec(), 2024, dir / "corpus").annotations;
        records = parse_annotations(annotations);
    }
};

const Corpus& corpus() {
    static const Corpus c;
    return c;
}

void metric_oracles(Outcome& o) {
    const auto start = std::clock();
    Rng rng(101);
    const int scenarios = 500;
    for (int t = 0; t < scenarios; ++t) {
        std::vector<Detection> dets;
        std::vector<BoundingBox> gts;
        const auto nd = rng.uniform_index(9), ng = rng.uniform_index(6);
        for (std::size_t i = 0; i < nd; ++i) dets.push_back(random_detection(rng, 30, 20));
        for (std::size_t i = 0; i < ng; ++i) gts.push_back(oracle::random_box(rng, 30, 20));
        for (const auto& d : dets) {
            for (const auto& g : gts) o.require(iou(d.bbox, g) == oracle::pixel_iou(d.bbox, g), "iou");
        }
        const double thr = rng.uniform(0.1, 0.9);
        const auto m = match_detections(dets, gts, thr);
        const auto om = oracle::greedy_match(dets, gts, thr);
        o.require(m.detection_is_tp == om.tp && m.detection_matched_gt == om.gt_of, "match_detections");
        o.require(std::abs(average_precision(dets, gts, thr) - oracle::staircase_ap(dets, gts, thr)) <= 1e-9,
                  "average_precision");
    }
    const double secs = cpu_seconds(start);
    o.require(secs < 10.0, "runtime");
    o.detail << scenarios << " scenarios, " << secs << " s CPU";
}

void report_identities(Outcome& o) {
    Rng rng(102);
    const int sets = 500;
    for (int t = 0; t < sets; ++t) {
        const auto n = 1 + rng.uniform_index(80);
        std::vector<StageLabel> truths, preds;
        for (std::size_t i = 0; i < n; ++i) {
            truths.push_back(kStageOrder[rng.uniform_index(kNumStages)]);
            preds.push_back(rng.uniform01() < 0.6 ? truths.back() : kStageOrder[rng.uniform_index(kNumStages)]);
        }
        const auto r = classification_report(truths, preds);
        o.require(r.weighted_avg.recall == r.accuracy, "weighted recall == accuracy");
        double f1_sum = 0.0;
        for (const auto& c : r.per_class) f1_sum += c.f1;
        o.require(std::abs(r.macro_avg.f1 - f1_sum / kNumStages) <= 1e-12, "macro f1");
    }
    const auto ring = format_metric(f1_score(0.91, 0.77));
    const auto schizont = format_metric(f1_score(0.87, 0.87));
    o.require(ring == "0.83", "f1(0.91, 0.77)");
    o.require(schizont == "0.87", "f1(0.87, 0.87)");
    o.detail << sets << " prediction sets; f1(0.91,0.77)=" << ring << " f1(0.87,0.87)=" << schizont
             << " (a 0.97 f1 is unreachable when P = R = 0.87)";
}

void dataset_protocol(Outcome& o) {
    const auto run = [] {
        const auto records = parse_annotations(corpus().annotations);
        const auto ds = balanced_subset(stage_crops_from_records(records), 140, 0);
        const auto split = stratified_split(ds, 0.9, 0);
        return std::tuple{ds, split, to_json(ds).dump() + to_json(split.train).dump() + to_json(split.test).dump()};
    };
    const auto [ds, split, bytes] = run();
    o.require(ds.size() == 560, "560 balanced items");
    o.require(split.train.size() == 504 && split.test.size() == 56, "504/56 split");
    for (std::size_t k = 0; k < kNumStages; ++k) {
        o.require(split.train.per_class_counts[k] == 126 && split.test.per_class_counts[k] == 14, "126/14 per class");
    }
    o.require(std::get<2>(run()) == bytes, "byte-identical rerun");
    o.detail << ds.size() << " items, " << split.train.size() << "/" << split.test.size();
}

void nms_properties(Outcome& o) {
    const auto start = std::clock();
    Rng rng(104);
    DetectorConfig config;
    const int sets = 1000;
    for (int t = 0; t < sets; ++t) {
        std::vector<Detection> raw;
        const auto n = rng.uniform_index(30);
        for (std::size_t i = 0; i < n; ++i) {
            auto d = random_detection(rng, 80, 30);
            d.bbox.max_row += rng.uniform_int(0, 15);
            d.bbox.max_col += rng.uniform_int(0, 15);
            raw.push_back(d);
        }
        const double thr = rng.uniform(0.1, 0.9);
        const auto kept = nms(raw, thr);
        for (std::size_t i = 0; i < kept.size(); ++i) {
            for (std::size_t j = i + 1; j < kept.size(); ++j) o.require(iou(kept[i].bbox, kept[j].bbox) <= thr, "no overlap");
        }
        o.require(nms(kept, thr) == kept, "idempotent");

        config.nms_iou_threshold = thr;
        config.score_threshold = rng.uniform01();
        const auto out = postprocess_detections(raw, 80, 80, config);
        for (std::size_t i = 0; i < out.size(); ++i) {
            o.require(out[i].bbox.fits_within(80, 80), "clipped");
            if (i > 0) o.require(out[i - 1].score >= out[i].score, "sorted");
        }
    }

    const auto& c = corpus();
    const auto model = train_detector(std::vector<SlideRecord>(c.records.begin(), c.records.begin() + 20),
                                      c.dir / "corpus", DetectorConfig{}, detector_backend("reference"));
    for (std::size_t i = 20; i < 40; ++i) {
        const cv::Mat image = load_slide_image(resolve_image_path(c.dir / "corpus", c.records[i]));
        const auto dets = detect(model, image, DetectorConfig{});
        for (std::size_t j = 0; j < dets.size(); ++j) {
            o.require(dets[j].bbox.fits_within(image.rows, image.cols), "detect clipped");
            if (j > 0) o.require(dets[j - 1].score >= dets[j].score, "detect sorted");
        }
    }
    const double secs = cpu_seconds(start);
    o.require(secs < 30.0, "runtime");
    o.detail << sets << " sets + 20 slides, " << secs << " s CPU";
}

void end_to_end(Outcome& o) {
    const auto start = std::clock();
    const auto wall = std::chrono::steady_clock::now();
    PipelineConfig config;
    config.annotations = corpus().annotations;
    config.output_dir = corpus().dir / "compare";
    const auto summary = run_experiment(config, ExperimentMode::compare);
    const double secs = cpu_seconds(start);
    const double wall_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall).count();

    o.require(summary.detection_map.has_value() && *summary.detection_map >= 0.95, "mAP >= 0.95");
    o.require(summary.stage_accuracy.has_value() && *summary.stage_accuracy >= 0.95, "stage accuracy >= 0.95");
    o.require(summary.comparison.size() == 3, "comparison rows");
    o.require(std::filesystem::exists(config.output_dir / "comparison.txt"), "comparison table written");
    o.require(secs < 300.0, "runtime");
    o.detail << "mAP=" << summary.detection_map.value_or(-1) << " stage_acc=" << summary.stage_accuracy.value_or(-1)
             << ", " << secs << " s CPU (" << wall_secs << " s wall)\n"
             << render_comparison(summary.comparison);
}

void classifier_numerics(Outcome& o) {
    Rng rng(106);
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
        const std::array<int, 5> widths{6, 5, 4, 3, 4};
        auto model = make_classifier(widths, 200 + static_cast<std::uint64_t>(t));
        for (auto& l : model.layers) {
            for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = 0.1 * rng.normal();
        }
        Eigen::MatrixXd x(7, 6);
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.normal();
        std::vector<int> y;
        for (int i = 0; i < 7; ++i) y.push_back(static_cast<int>(rng.uniform_index(4)));

        const auto lg = loss_and_gradients(model, x, y);
        const double h = 1e-6;
        const auto check = [&](double analytic, const ClassifierModel& plus, const ClassifierModel& minus) {
            const double fd = (oracle::loss(plus, x, y) - oracle::loss(minus, x, y)) / (2 * h);
            if (std::abs(fd) <= 1e-7 && std::abs(analytic) <= 1e-7) return;
            const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-8});
            worst = std::max(worst, rel);
        };
        for (std::size_t l = 0; l < model.layers.size(); ++l) {
            for (Eigen::Index r = 0; r < model.layers[l].weights.rows(); ++r) {
                for (Eigen::Index c = 0; c < model.layers[l].weights.cols(); ++c) {
                    auto plus = model, minus = model;
                    plus.layers[l].weights(r, c) += h;
                    minus.layers[l].weights(r, c) -= h;
                    check(lg.gradients[l].weights(r, c), plus, minus);
                }
                auto plus = model, minus = model;
                plus.layers[l].bias(r) += h;
                minus.layers[l].bias(r) -= h;
                check(lg.gradients[l].bias(r), plus, minus);
            }
        }

        const Eigen::MatrixXd p = softmax_rows(forward_logits(model, x * 50.0));
        for (Eigen::Index i = 0; i < p.rows(); ++i) o.require(std::abs(p.row(i).sum() - 1.0) <= 1e-6, "softmax sum");
    }
    o.require(worst <= 1e-4, "gradient relative error");

    auto zero = make_classifier(kStageClassifierWidths, 1);
    for (auto& l : zero.layers) {
        l.weights.setZero();
        l.bias.setZero();
    }
    const auto pred = classify_crop(zero, FeatureVector(std::vector<double>(FeatureVector::kLength, 0.5)));
    for (double p : pred.probabilities) o.require(p == 0.25, "uniform probabilities");
    o.require(pred.predicted == kStageOrder[0], "first-class tie-break");
    o.detail << "max gradient relative error " << worst;
}

void reproducibility(Outcome& o) {
    testutil::TempDir dir("repro");
    const auto summary = generate_corpus(40, default_synth_spec(), 77, dir / "corpus");
    PipelineConfig config;
    config.annotations = summary.annotations;
    config.classifier.epochs = 30;
    config.output_dir = dir / "a";
    run_experiment(config, ExperimentMode::compare);
    config.output_dir = dir / "b";
    run_experiment(config, ExperimentMode::compare);
    for (const char* name : {"metrics.json", "comparison.json", "classification_report.json",
                             "detection_eval_two_stage.json", "detection_eval_one_stage.json"}) {
        o.require(slurp(dir / "a" / name) == slurp(dir / "b" / name), name);
    }
    o.detail << "two compare runs on 40 slides";
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
        {"metric oracle equivalence", metric_oracles},
        {"classification report identities", report_identities},
        {"dataset protocol", dataset_protocol},
        {"nms and detection properties", nms_properties},
        {"synthetic end-to-end", end_to_end},
        {"classifier numerics", classifier_numerics},
        {"reproducibility", reproducibility},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            criteria[i].second(o);
        } catch (const std::exception& e) {
            o.ok = false;
            o.detail << "exception: " << e.what();
        }
        failures += o.ok ? 0 : 1;
        std::cout << (o.ok ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first
                  << "): " << o.detail.str() << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
