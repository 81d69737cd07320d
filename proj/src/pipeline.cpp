#include "malaria/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "malaria/errors.hpp"
#include "malaria/metrics.hpp"
#include "malaria/rng.hpp"
#include "malaria/taxonomy.hpp"

namespace malaria {

namespace {

void finalize_counts(SlideReport& report) {
    report.per_stage_counts = {};
    for (const auto& e : report.entries) ++report.per_stage_counts[stage_index(e.stage)];
    report.infected_cell_count = report.entries.size();
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

bool is_stage_classifier(const ClassifierModel& model) {
    const auto w = model.widths();
    return w.size() == kStageClassifierWidths.size() &&
           std::equal(w.begin(), w.end(), kStageClassifierWidths.begin());
}

/// Runs one experiment stage; any failure is rethrown with the stage name
/// prepended, keeping the error category for the CLI exit code.
template <typename F>
decltype(auto) run_stage(const std::string& name, std::string& current, F&& body) {
    current = name;
    try {
        return body();
    } catch (const IoError& e) {
        throw IoError("stage '" + name + "': " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError("stage '" + name + "': " + e.what());
    } catch (const CapacityError& e) {
        throw CapacityError("stage '" + name + "': " + e.what());
    } catch (const ParseError& e) {
        throw ParseError("stage '" + name + "': " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError("stage '" + name + "': " + e.what());
    } catch (const cv::Exception& e) {
        throw Error("stage '" + name + "': OpenCV: " + e.what());
    }
}

DetectionEvaluation evaluate_stagewise(const std::vector<std::vector<Detection>>& per_slide,
                                       const std::vector<SlideTargets>& targets, double iou_threshold) {
    DetectionEvaluation ev;
    ev.iou_threshold = iou_threshold;
    std::vector<double> aps;
    std::size_t tp = 0;
    std::size_t gts = 0;
    for (auto s : kStageOrder) {
        std::vector<ImageEvaluation> images;
        for (std::size_t i = 0; i < per_slide.size(); ++i) {
            ImageEvaluation im;
            for (const auto& d : per_slide[i]) {
                if (d.label == DetectionLabel{s}) im.detections.push_back(d);
            }
            for (std::size_t k = 0; k < targets[i].boxes.size(); ++k) {
                if (targets[i].labels[k] == DetectionLabel{s}) im.ground_truths.push_back(targets[i].boxes[k]);
            }
            tp += match_detections(im.detections, im.ground_truths, iou_threshold).true_positives();
            gts += im.ground_truths.size();
            images.push_back(std::move(im));
        }
        const double ap = average_precision(images, iou_threshold);
        ev.per_class_ap.emplace_back(std::string(to_string(s)), ap);
        aps.push_back(ap);
    }
    ev.map = mean_average_precision(aps);
    ev.recall = gts == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(gts);
    return ev;
}

nlohmann::json stamp(nlohmann::json doc, const std::string& fingerprint, const PipelineConfig& config) {
    doc["config_fingerprint"] = fingerprint;
    doc["seeds"] = {{"seed", config.seed}, {"detector", config.detector.seed}, {"classifier", config.classifier.seed}};
    return doc;
}

} // namespace

std::string_view to_string(ExperimentMode mode) {
    switch (mode) {
    case ExperimentMode::two_stage: return "two_stage";
    case ExperimentMode::one_stage: return "one_stage";
    case ExperimentMode::compare: return "compare";
    }
    return "two_stage";
}

ExperimentMode experiment_mode_from_string(std::string_view text) {
    if (text == "two_stage") return ExperimentMode::two_stage;
    if (text == "one_stage") return ExperimentMode::one_stage;
    if (text == "compare") return ExperimentMode::compare;
    throw ConfigError("unknown mode '" + std::string(text) + "' (expected two_stage, one_stage or compare)");
}

SlideReport run_two_stage(const cv::Mat& image, const std::string& image_id, const DetectorModel& detector,
                          const ClassifierModel& classifier, const FeatureBackend& features,
                          const PipelineConfig& config) {
    if (detector.class_mode != ClassMode::binary_infected) {
        throw ConfigError("two-stage flow needs a binary_infected detector, got " +
                          std::string(to_string(detector.class_mode)));
    }
    if (!is_stage_classifier(classifier)) {
        throw ConfigError("two-stage flow needs a 2048 -> 4 stage classifier");
    }
    if (features.crop_size() != config.crop_size) {
        throw ConfigError("feature backend expects " + std::to_string(features.crop_size()) +
                          " px crops but crop_size is " + std::to_string(config.crop_size));
    }
    DetectorConfig det_config = config.detector;
    det_config.class_mode = ClassMode::binary_infected;

    SlideReport report;
    report.image_id = image_id;
    report.mode = "two_stage";
    report.config_fingerprint = config_fingerprint(config);
    for (const auto& d : detect(detector, image, det_config)) {
        try {
            const auto crop = extract_crop(image, d.bbox, config.crop_size, image_id);
            const auto prediction = classify_crop(classifier, extract_features(crop, features));
            report.entries.push_back({d.bbox, d.score, prediction.probabilities, prediction.predicted, "classifier"});
        } catch (const Error& e) {
            report.failures.push_back({d.bbox, d.score, e.what()});
        } catch (const cv::Exception& e) {
            report.failures.push_back({d.bbox, d.score, e.what()});
        }
    }
    finalize_counts(report);
    return report;
}

SlideReport run_one_stage(const cv::Mat& image, const std::string& image_id, const DetectorModel& detector,
                          const PipelineConfig& config) {
    if (detector.class_mode != ClassMode::multiclass_stage) {
        throw ConfigError("one-stage flow needs a multiclass_stage detector, got " +
                          std::string(to_string(detector.class_mode)));
    }
    DetectorConfig det_config = config.detector;
    det_config.class_mode = ClassMode::multiclass_stage;

    SlideReport report;
    report.image_id = image_id;
    report.mode = "one_stage";
    report.config_fingerprint = config_fingerprint(config);
    for (const auto& d : detect(detector, image, det_config)) {
        const auto* stage = std::get_if<StageLabel>(&d.label);
        if (!stage) {
            report.failures.push_back({d.bbox, d.score, "detector emitted a non-stage label"});
            continue;
        }
        ReportEntry entry{d.bbox, d.score, {}, *stage, "detector"};
        entry.stage_probabilities[stage_index(*stage)] = 1.0;
        report.entries.push_back(entry);
    }
    finalize_counts(report);
    return report;
}

std::vector<Detection> stage_detections(const SlideReport& report) {
    std::vector<Detection> out;
    out.reserve(report.entries.size());
    for (const auto& e : report.entries) {
        out.push_back({e.bbox, e.detector_score * e.stage_probabilities[stage_index(e.stage)], e.stage});
    }
    return out;
}

std::vector<FeatureVector> dataset_features(const ClassifierDataset& dataset,
                                            const std::vector<SlideRecord>& records,
                                            const std::filesystem::path& image_root,
                                            const FeatureBackend& backend) {
    std::map<std::string, const SlideRecord*> by_id;
    for (const auto& r : records) by_id[r.image_id] = &r;

    std::map<std::string, std::vector<std::size_t>> by_image;
    for (std::size_t i = 0; i < dataset.items.size(); ++i) by_image[dataset.items[i].source.image_id].push_back(i);

    std::vector<std::optional<FeatureVector>> slots(dataset.items.size());
    for (const auto& [image_id, indices] : by_image) {
        const auto it = by_id.find(image_id);
        if (it == by_id.end()) throw ValidationError("dataset references unknown image '" + image_id + "'");
        const cv::Mat image = load_slide_image(resolve_image_path(image_root, *it->second));
        for (auto i : indices) {
            const auto crop = extract_crop(image, dataset.items[i].source.bbox, backend.crop_size(), image_id);
            slots[i] = extract_features(crop, backend);
        }
    }
    std::vector<FeatureVector> out;
    out.reserve(slots.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

void export_crops(const ClassifierDataset& dataset, const std::vector<SlideRecord>& records,
                  const std::filesystem::path& image_root, int crop_size, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    std::map<std::string, const SlideRecord*> by_id;
    for (const auto& r : records) by_id[r.image_id] = &r;
    std::map<std::string, cv::Mat> cache;
    for (const auto& item : dataset.items) {
        const auto it = by_id.find(item.source.image_id);
        if (it == by_id.end()) throw ValidationError("dataset references unknown image '" + item.source.image_id + "'");
        auto& image = cache[item.source.image_id];
        if (image.empty()) image = load_slide_image(resolve_image_path(image_root, *it->second));
        const auto crop = extract_crop(image, item.source.bbox, crop_size, item.source.image_id);
        const auto path = out_dir / (item.source.image_id + "_" + std::to_string(item.source.annotation_index) + "_" +
                                     std::string(to_string(item.label)) + ".png");
        if (!cv::imwrite(path.string(), crop_to_bgr8(crop))) throw IoError("cannot write " + path.string());
    }
}

SlideSplit split_slides(const std::vector<SlideRecord>& records, double train_fraction, std::uint64_t seed) {
    if (records.size() < 2) throw ValidationError("need at least two slides to split");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ValidationError("slide split: train_fraction must lie in (0, 1)");
    }
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0x511de));
    rng.shuffle(order);
    auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(records.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, records.size() - 1);
    std::vector<bool> in_train(records.size(), false);
    for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;
    SlideSplit out;
    for (std::size_t i = 0; i < records.size(); ++i) (in_train[i] ? out.train : out.test).push_back(records[i]);
    return out;
}

std::string render_comparison(const std::vector<ModeMetrics>& rows) {
    std::ostringstream out;
    char line[128];
    std::snprintf(line, sizeof line, "%-28s %8s %8s\n", "mode", "mAP", "recall");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-28s %8.3f %8.3f\n", r.mode.c_str(), r.map, r.recall);
        out << line;
    }
    return out.str();
}

ExperimentSummary run_experiment(const PipelineConfig& config, ExperimentMode mode) {
    validate(config);
    const std::string fingerprint = config_fingerprint(config);
    const auto out_dir = config.output_dir;
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "dataset", ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    auto status = [&](bool complete, const std::string& failed_stage) {
        nlohmann::json doc{{"complete", complete}, {"mode", to_string(mode)}, {"config_fingerprint", fingerprint}};
        if (!complete) doc["failed_stage"] = failed_stage;
        write_json(out_dir / "status.json", doc);
    };
    status(false, "not started");

    ExperimentSummary summary;
    summary.output_dir = out_dir;
    summary.fingerprint = fingerprint;
    std::string current;
    try {
        write_json(out_dir / "config.json", to_json(config));
        const auto root = image_root_for(config);
        const auto records = run_stage("ingest", current, [&] { return parse_annotations(config.annotations); });

        // Slide-level partition shared by every mode.
        std::vector<SlideRecord> train_slides, test_slides;
        run_stage("split", current, [&] {
            auto parts = split_slides(records, config.train_fraction, config.seed);
            nlohmann::json split{{"train", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
            for (const auto& r : parts.train) split["train"].push_back(r.image_id);
            for (const auto& r : parts.test) split["test"].push_back(r.image_id);
            write_json(out_dir / "split.json", stamp(split, fingerprint, config));
            train_slides = std::move(parts.train);
            test_slides = std::move(parts.test);
        });

        nlohmann::json backend_options{{"weights", config.detector_weights.string()},
                                       {"graph_config", config.detector_graph_config.string()}};
        const auto& backend = run_stage("detector-backend", current, [&]() -> const DetectorBackend& {
            return detector_backend(config.detector_backend);
        });

        nlohmann::json metrics{{"config_fingerprint", fingerprint},
                               {"mode", to_string(mode)},
                               {"slides", {{"train", train_slides.size()}, {"test", test_slides.size()}}},
                               {"seeds",
                                {{"seed", config.seed},
                                 {"detector", config.detector.seed},
                                 {"classifier", config.classifier.seed}}}};

        std::vector<ModeMetrics> comparison;
        const bool want_two = mode != ExperimentMode::one_stage;
        const bool want_one = mode != ExperimentMode::two_stage;
        const auto stage_gt = stage_targets(test_slides);

        if (want_two) {
            DetectorConfig det_config = config.detector;
            det_config.class_mode = ClassMode::binary_infected;
            const auto detector = run_stage("train-detector-binary", current, [&] {
                auto m = train_detector(train_slides, root, det_config, backend, backend_options);
                save_detector_model(out_dir / "detector_binary.model.json", m);
                return m;
            });

            DatasetSplit split;
            run_stage("classifier-dataset", current, [&] {
                std::size_t difficult = 0;
                const auto items = stage_crops_from_records(train_slides, &difficult);
                const auto balanced = balanced_subset(items, config.balance_cap, config.seed);
                split = stratified_split(balanced, config.train_fraction, config.seed);
                const nlohmann::json extra{{"difficult_excluded", difficult},
                                           {"available_per_class", count_per_class(items)},
                                           {"balance_cap", config.balance_cap},
                                           {"train_fraction", config.train_fraction},
                                           {"config_fingerprint", fingerprint}};
                write_dataset(out_dir / "dataset" / "classifier_balanced.json", balanced, extra);
                write_dataset(out_dir / "dataset" / "classifier_train.json", split.train, extra);
                write_dataset(out_dir / "dataset" / "classifier_test.json", split.test, extra);
            });

            const auto features = run_stage("feature-backend", current, [&] {
                return make_feature_backend(config.feature_backend, config.crop_size, config.feature_weights);
            });
            std::vector<FeatureVector> train_features, test_features;
            run_stage("features", current, [&] {
                train_features = dataset_features(split.train, train_slides, root, *features);
                test_features = dataset_features(split.test, train_slides, root, *features);
            });

            const auto classifier = run_stage("train-classifier", current, [&] {
                std::vector<StageLabel> labels;
                for (const auto& item : split.train.items) labels.push_back(item.label);
                auto m = train_classifier(train_features, labels, config.classifier);
                save_classifier(out_dir / "classifier.model", m);
                return m;
            });

            run_stage("evaluate-classifier", current, [&] {
                std::vector<StageLabel> truths, preds;
                for (std::size_t i = 0; i < split.test.items.size(); ++i) {
                    truths.push_back(split.test.items[i].label);
                    preds.push_back(classify_crop(classifier, test_features[i]).predicted);
                }
                const auto report = classification_report(truths, preds);
                write_text(out_dir / "classification_report.txt", render_report(report));
                auto doc = stamp(to_json(report), fingerprint, config);
                doc["test_crops"] = truths.size();
                write_json(out_dir / "classification_report.json", doc);
                metrics["classification"] = to_json(report);
                summary.stage_accuracy = report.accuracy;
            });

            run_stage("evaluate-two-stage", current, [&] {
                const auto binary_gt = collapse_to_infected(test_slides);
                std::vector<ImageEvaluation> images;
                std::vector<std::vector<Detection>> staged;
                nlohmann::json reports = nlohmann::json::array();
                nlohmann::json detections = nlohmann::json::array();
                for (std::size_t i = 0; i < test_slides.size(); ++i) {
                    const cv::Mat image = load_slide_image(resolve_image_path(root, test_slides[i]));
                    auto dets = detect(detector, image, det_config);
                    for (auto& d : detections_to_json(test_slides[i].image_id, dets)) detections.push_back(d);
                    images.push_back({std::move(dets), binary_gt[i].boxes});
                    const auto report = run_two_stage(image, test_slides[i].image_id, detector, classifier,
                                                      *features, config);
                    staged.push_back(stage_detections(report));
                    reports.push_back(to_json(report));
                }
                DetectionEvaluation det_eval;
                det_eval.iou_threshold = config.eval_iou_threshold;
                const double ap = average_precision(images, config.eval_iou_threshold);
                det_eval.per_class_ap = {{"infected", ap}};
                det_eval.map = mean_average_precision(std::vector<double>{ap});
                det_eval.recall = detection_recall(images, config.eval_iou_threshold);
                const auto stage_eval = evaluate_stagewise(staged, stage_gt, config.eval_iou_threshold);

                write_json(out_dir / "detections_two_stage.json", detections);
                write_json(out_dir / "slide_reports_two_stage.json", reports);
                write_json(out_dir / "detection_eval_two_stage.json", stamp(to_json(det_eval), fingerprint, config));
                write_json(out_dir / "stage_eval_two_stage.json", stamp(to_json(stage_eval), fingerprint, config));
                metrics["two_stage"] = {{"detection", to_json(det_eval)}, {"stagewise", to_json(stage_eval)}};
                summary.detection_map = det_eval.map;
                comparison.push_back({"two_stage (infected)", det_eval.map, det_eval.recall});
                comparison.push_back({"two_stage (stage-wise)", stage_eval.map, stage_eval.recall});
            });
        }

        if (want_one) {
            DetectorConfig det_config = config.detector;
            det_config.class_mode = ClassMode::multiclass_stage;
            const auto detector = run_stage("train-detector-multiclass", current, [&] {
                auto m = train_detector(train_slides, root, det_config, backend, backend_options);
                save_detector_model(out_dir / "detector_multiclass.model.json", m);
                return m;
            });
            run_stage("evaluate-one-stage", current, [&] {
                std::vector<std::vector<Detection>> staged;
                nlohmann::json reports = nlohmann::json::array();
                for (const auto& slide : test_slides) {
                    const cv::Mat image = load_slide_image(resolve_image_path(root, slide));
                    const auto report = run_one_stage(image, slide.image_id, detector, config);
                    staged.push_back(stage_detections(report));
                    reports.push_back(to_json(report));
                }
                const auto ev = evaluate_stagewise(staged, stage_gt, config.eval_iou_threshold);
                write_json(out_dir / "slide_reports_one_stage.json", reports);
                write_json(out_dir / "detection_eval_one_stage.json", stamp(to_json(ev), fingerprint, config));
                metrics["one_stage"] = {{"stagewise", to_json(ev)}};
                comparison.push_back({"one_stage (stage-wise)", ev.map, ev.recall});
                if (!summary.detection_map) summary.detection_map = ev.map;
            });
        }

        run_stage("write-summary", current, [&] {
            nlohmann::json rows = nlohmann::json::array();
            for (const auto& r : comparison) rows.push_back({{"mode", r.mode}, {"map", r.map}, {"recall", r.recall}});
            metrics["comparison"] = rows;
            if (mode == ExperimentMode::compare) {
                write_text(out_dir / "comparison.txt", render_comparison(comparison));
                write_json(out_dir / "comparison.json", stamp({{"rows", rows}}, fingerprint, config));
            }
            write_json(out_dir / "metrics.json", metrics);
        });
        summary.metrics = metrics;
        summary.comparison = comparison;
    } catch (...) {
        try {
            status(false, current);
        } catch (...) {
        }
        throw;
    }
    status(true, "");
    return summary;
}

} // namespace malaria
