// Command-line front end: synth, ingest, train-detect, train-classify,
// predict, evaluate and compare.
//
// Exit codes: 0 success, 1 validation/config error, 2 I/O error.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "malaria/classifier.hpp"
#include "malaria/dataset.hpp"
#include "malaria/detection.hpp"
#include "malaria/errors.hpp"
#include "malaria/metrics.hpp"
#include "malaria/pipeline.hpp"
#include "malaria/synth.hpp"

namespace fs = std::filesystem;
using namespace malaria;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config, "Pipeline config (JSON)");
    if (config_required) c->required();
    cmd->add_option("--seed", opts.seed, "Override the master seed");
    cmd->add_option("--out", opts.out, "Output directory (overrides output_dir)");
}

PipelineConfig load_config(const CommonOptions& opts) {
    PipelineConfig config = opts.config.empty() ? PipelineConfig{} : load_pipeline_config(opts.config);
    if (opts.seed) config.seed = *opts.seed;
    if (!opts.out.empty()) config.output_dir = opts.out;
    return config;
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

fs::path ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

int cmd_synth(const CommonOptions& opts, std::size_t slides, const std::string& spec_path) {
    SynthSpec spec = default_synth_spec();
    if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        if (!in) throw IoError("cannot read synth spec " + spec_path);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(spec_path + ": " + e.what());
        }
        spec = synth_spec_from_json(doc);
    }
    const fs::path out = opts.out.empty() ? fs::path("synthetic") : fs::path(opts.out);
    const auto summary = generate_corpus(slides, spec, opts.seed.value_or(0), out);
    std::cout << "wrote " << summary.slides << " slides to " << out.string() << '\n';
    for (const auto& [category, count] : summary.totals) std::cout << "  " << to_string(category) << ": " << count << '\n';
    return 0;
}

int cmd_ingest(const CommonOptions& opts) {
    const auto config = load_config(opts);
    validate(config);
    const auto records = parse_annotations(config.annotations);
    std::map<std::string, std::size_t> per_category;
    std::size_t cells = 0;
    for (const auto& r : records) {
        for (const auto& a : r.annotations) {
            ++per_category[std::string(to_string(a.category))];
            ++cells;
        }
    }
    const auto split = split_slides(records, config.train_fraction, config.seed);
    std::size_t difficult = 0;
    const auto items = stage_crops_from_records(split.train, &difficult);
    const auto balanced = balanced_subset(items, config.balance_cap, config.seed);
    const auto parts = stratified_split(balanced, config.train_fraction, config.seed);

    const auto dir = ensure_dir(config.output_dir / "dataset");
    const nlohmann::json extra{{"difficult_excluded", difficult},
                               {"balance_cap", config.balance_cap},
                               {"train_fraction", config.train_fraction},
                               {"config_fingerprint", config_fingerprint(config)}};
    write_dataset(dir / "classifier_balanced.json", balanced, extra);
    write_dataset(dir / "classifier_train.json", parts.train, extra);
    write_dataset(dir / "classifier_test.json", parts.test, extra);
    write_json(config.output_dir / "ingest_summary.json",
               {{"slides", records.size()},
                {"cells", cells},
                {"per_category", per_category},
                {"train_slides", split.train.size()},
                {"test_slides", split.test.size()},
                {"config_fingerprint", config_fingerprint(config)}});

    std::cout << records.size() << " slides, " << cells << " cells\n";
    for (const auto& [name, n] : per_category) std::cout << "  " << name << ": " << n << '\n';
    std::cout << "classifier dataset: " << balanced.size() << " crops (" << parts.train.size() << " train / "
              << parts.test.size() << " test)\n";
    for (const auto& w : balanced.warnings) std::cerr << "warning: " << w << '\n';
    return 0;
}

int cmd_train_detect(const CommonOptions& opts, const std::string& class_mode) {
    auto config = load_config(opts);
    if (!class_mode.empty()) config.detector.class_mode = class_mode_from_string(class_mode);
    validate(config);
    const auto records = parse_annotations(config.annotations);
    const auto split = split_slides(records, config.train_fraction, config.seed);
    const nlohmann::json options{{"weights", config.detector_weights.string()},
                                 {"graph_config", config.detector_graph_config.string()}};
    const auto model = train_detector(split.train, image_root_for(config), config.detector,
                                      detector_backend(config.detector_backend), options);
    const auto path = ensure_dir(config.output_dir) /
                      (config.detector.class_mode == ClassMode::binary_infected ? "detector_binary.model.json"
                                                                                 : "detector_multiclass.model.json");
    save_detector_model(path, model);
    std::cout << "detector (" << to_string(model.class_mode) << ", fingerprint "
              << model.fingerprint.at("hash").get<std::string>() << ") -> " << path.string() << '\n';
    return 0;
}

int cmd_train_classify(const CommonOptions& opts, bool export_audit) {
    const auto config = load_config(opts);
    validate(config);
    const auto records = parse_annotations(config.annotations);
    const auto root = image_root_for(config);
    const auto split = split_slides(records, config.train_fraction, config.seed);
    std::size_t difficult = 0;
    const auto items = stage_crops_from_records(split.train, &difficult);
    const auto balanced = balanced_subset(items, config.balance_cap, config.seed);
    const auto parts = stratified_split(balanced, config.train_fraction, config.seed);
    for (const auto& w : balanced.warnings) std::cerr << "warning: " << w << '\n';

    const auto out = ensure_dir(config.output_dir);
    const auto dataset_dir = ensure_dir(out / "dataset");
    const nlohmann::json extra{{"difficult_excluded", difficult}, {"config_fingerprint", config_fingerprint(config)}};
    write_dataset(dataset_dir / "classifier_train.json", parts.train, extra);
    write_dataset(dataset_dir / "classifier_test.json", parts.test, extra);
    if (export_audit) export_crops(balanced, split.train, root, config.crop_size, out / "crops");

    const auto backend = make_feature_backend(config.feature_backend, config.crop_size, config.feature_weights);
    const auto train_features = dataset_features(parts.train, split.train, root, *backend);
    const auto test_features = dataset_features(parts.test, split.train, root, *backend);
    std::vector<StageLabel> labels;
    for (const auto& item : parts.train.items) labels.push_back(item.label);
    const auto model = train_classifier(train_features, labels, config.classifier);
    save_classifier(out / "classifier.model", model);

    std::vector<StageLabel> truths, preds;
    for (std::size_t i = 0; i < parts.test.items.size(); ++i) {
        truths.push_back(parts.test.items[i].label);
        preds.push_back(classify_crop(model, test_features[i]).predicted);
    }
    const auto report = classification_report(truths, preds);
    const auto text = render_report(report);
    std::ofstream(out / "classification_report.txt") << text;
    auto doc = to_json(report);
    doc["config_fingerprint"] = config_fingerprint(config);
    write_json(out / "classification_report.json", doc);
    std::cout << text;
    return 0;
}

int cmd_predict(const CommonOptions& opts, const std::string& detector_path, const std::string& classifier_path,
                const std::vector<std::string>& images) {
    const auto config = load_config(opts);
    validate(config, false);
    const auto detector = load_detector_model(detector_path);
    const auto out = ensure_dir(config.output_dir);

    std::optional<ClassifierModel> classifier;
    std::unique_ptr<FeatureBackend> features;
    if (detector.class_mode == ClassMode::binary_infected) {
        if (classifier_path.empty()) throw ConfigError("a binary detector needs --classifier for the two-stage flow");
        classifier = load_classifier(classifier_path);
        features = make_feature_backend(config.feature_backend, config.crop_size, config.feature_weights);
    }
    for (const auto& image_path : images) {
        const cv::Mat image = load_slide_image(image_path);
        const auto id = fs::path(image_path).stem().string();
        const auto report = classifier ? run_two_stage(image, id, detector, *classifier, *features, config)
                                       : run_one_stage(image, id, detector, config);
        write_json(out / ("slide_report_" + id + ".json"), to_json(report));
        std::cout << id << ": " << report.infected_cell_count << " infected";
        for (auto s : kStageOrder) std::cout << ", " << to_string(s) << ' ' << report.per_stage_counts[stage_index(s)];
        if (!report.failures.empty()) std::cout << " (" << report.failures.size() << " crop failures)";
        std::cout << '\n';
    }
    return 0;
}

int cmd_experiment(const CommonOptions& opts, ExperimentMode mode) {
    const auto config = load_config(opts);
    const auto summary = run_experiment(config, mode);
    if (mode == ExperimentMode::compare) {
        std::cout << render_comparison(summary.comparison);
    } else {
        for (const auto& row : summary.comparison) {
            std::cout << row.mode << ": mAP " << format_metric(row.map) << ", recall " << format_metric(row.recall) << '\n';
        }
    }
    if (summary.stage_accuracy) std::cout << "stage accuracy: " << format_metric(*summary.stage_accuracy) << '\n';
    std::cout << "artifacts in " << summary.output_dir.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage malaria blood-smear detection and stage classification"};
    app.require_subcommand(1);

    CommonOptions synth_opts, ingest_opts, detect_opts, classify_opts, predict_opts, eval_opts, compare_opts;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic slide corpus");
    add_common(synth, synth_opts, false);
    std::size_t slides = 200;
    std::string spec_path;
    synth->add_option("--slides", slides, "Number of slides")->check(CLI::PositiveNumber);
    synth->add_option("--spec", spec_path, "Synthetic slide spec (JSON)");

    auto* ingest = app.add_subcommand("ingest", "Parse annotations and build the balanced classifier dataset");
    add_common(ingest, ingest_opts);

    auto* train_detect = app.add_subcommand("train-detect", "Train the cell detector");
    add_common(train_detect, detect_opts);
    std::string class_mode;
    train_detect->add_option("--class-mode", class_mode, "binary_infected or multiclass_stage");

    auto* train_classify = app.add_subcommand("train-classify", "Train the stage classifier");
    add_common(train_classify, classify_opts);
    bool export_audit = false;
    train_classify->add_flag("--export-crops", export_audit, "Write every dataset crop as a PNG for audit");

    auto* predict = app.add_subcommand("predict", "Produce slide reports for images");
    add_common(predict, predict_opts, false);
    std::string detector_path, classifier_path;
    std::vector<std::string> images;
    predict->add_option("--detector", detector_path, "Detector model file")->required();
    predict->add_option("--classifier", classifier_path, "Classifier model file (two-stage)");
    predict->add_option("images", images, "Slide images")->required();

    auto* evaluate = app.add_subcommand("evaluate", "Run a full train/evaluate experiment");
    add_common(evaluate, eval_opts);
    std::string mode = "two_stage";
    evaluate->add_option("--mode", mode, "two_stage or one_stage");

    auto* compare = app.add_subcommand("compare", "Run both flows on the same split and tabulate them");
    add_common(compare, compare_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*synth) return cmd_synth(synth_opts, slides, spec_path);
        if (*ingest) return cmd_ingest(ingest_opts);
        if (*train_detect) return cmd_train_detect(detect_opts, class_mode);
        if (*train_classify) return cmd_train_classify(classify_opts, export_audit);
        if (*predict) return cmd_predict(predict_opts, detector_path, classifier_path, images);
        if (*evaluate) {
            const auto m = experiment_mode_from_string(mode);
            if (m == ExperimentMode::compare) throw ConfigError("use the compare subcommand for compare mode");
            return cmd_experiment(eval_opts, m);
        }
        if (*compare) return cmd_experiment(compare_opts, ExperimentMode::compare);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const cv::Exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
