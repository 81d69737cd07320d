#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "malaria/detection.hpp"
#include "malaria/errors.hpp"
#include "malaria/metrics.hpp"
#include "malaria/rng.hpp"
#include "malaria/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace malaria;

namespace {

std::vector<Detection> random_detections(Rng& rng, std::size_t n, int extent) {
    std::vector<Detection> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({oracle::random_box(rng, extent, 20), static_cast<double>(rng.uniform_int(0, 20)) / 20.0,
                       InfectionLabel::infected});
    }
    return out;
}

const DetectorModel& shared_detector(ClassMode mode) {
    static const auto build = [](ClassMode m) {
        const auto& corpus = testutil::SharedCorpus::get();
        DetectorConfig config;
        config.class_mode = m;
        return train_detector(corpus.records, corpus.dir.path(), config, detector_backend("reference"));
    };
    static const DetectorModel binary = build(ClassMode::binary_infected);
    static const DetectorModel multi = build(ClassMode::multiclass_stage);
    return mode == ClassMode::binary_infected ? binary : multi;
}

} // namespace

TEST_CASE("nms matches the brute-force oracle") {
    Rng rng(21);
    for (int t = 0; t < 300; ++t) {
        const auto dets = random_detections(rng, rng.uniform_index(15), 40);
        const double thr = rng.uniform(0.1, 0.9);
        CHECK(nms(dets, thr) == oracle::nms(dets, thr));
    }
}

TEST_CASE("nms leaves no overlapping survivors and is idempotent") {
    Rng rng(22);
    for (int t = 0; t < 300; ++t) {
        const auto dets = random_detections(rng, rng.uniform_index(20), 50);
        const auto kept = nms(dets, 0.5);
        for (std::size_t i = 0; i < kept.size(); ++i) {
            for (std::size_t j = i + 1; j < kept.size(); ++j) CHECK(iou(kept[i].bbox, kept[j].bbox) <= 0.5);
        }
        CHECK(nms(kept, 0.5) == kept);
    }
}

TEST_CASE("nms keeps the higher-scoring of two overlapping boxes") {
    const std::vector<Detection> dets{{{0, 0, 10, 10}, 0.6, InfectionLabel::infected},
                                      {{1, 1, 11, 11}, 0.9, InfectionLabel::infected},
                                      {{30, 30, 40, 40}, 0.7, InfectionLabel::infected}};
    const auto kept = nms(dets, 0.5);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].score == 0.9);
    CHECK(kept[1].score == 0.7);
}

TEST_CASE("postprocessing clips, thresholds and sorts") {
    Rng rng(23);
    DetectorConfig config;
    for (int t = 0; t < 200; ++t) {
        auto raw = random_detections(rng, rng.uniform_index(20), 60);
        for (auto& d : raw) {
            d.bbox.max_row += 10;  // some boxes now leave the 50x50 image
            d.score = rng.uniform(-0.2, 1.2);
        }
        config.score_threshold = rng.uniform01();
        const auto out = postprocess_detections(raw, 50, 50, config);
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i].bbox.fits_within(50, 50));
            CHECK(out[i].score >= config.score_threshold);
            CHECK(out[i].score <= 1.0);
            if (i > 0) CHECK(out[i - 1].score >= out[i].score);
        }
        auto stricter = config;
        stricter.score_threshold = std::min(1.0, config.score_threshold + 0.1);
        CHECK(postprocess_detections(raw, 50, 50, stricter).size() <= out.size());
    }
}

TEST_CASE("postprocessing suppresses only within a label") {
    const std::vector<Detection> raw{{{0, 0, 10, 10}, 0.9, StageLabel::ring},
                                     {{0, 0, 10, 10}, 0.8, StageLabel::schizont},
                                     {{0, 0, 10, 10}, 0.7, StageLabel::ring}};
    const auto out = postprocess_detections(raw, 20, 20, DetectorConfig{});
    REQUIRE(out.size() == 2);
    CHECK(out[0].label == DetectionLabel{StageLabel::ring});
    CHECK(out[1].label == DetectionLabel{StageLabel::schizont});
}

TEST_CASE("detector config validation") {
    DetectorConfig c;
    CHECK_NOTHROW(validate(c));
    c.score_threshold = 1.5;
    CHECK_THROWS_AS(validate(c), ValidationError);
    c = {};
    c.nms_iou_threshold = 1.0;
    CHECK_THROWS_AS(validate(c), ValidationError);
    c = {};
    c.iterations = 0;
    CHECK_THROWS_AS(validate(c), ValidationError);
}

TEST_CASE("collapse to a single infected class") {
    SlideRecord r{"s", "/images/s.png", 100, 100,
                  {{{0, 0, 10, 10}, CellCategory::red_blood_cell},
                   {{10, 10, 20, 20}, CellCategory::ring},
                   {{20, 20, 30, 30}, CellCategory::leukocyte},
                   {{30, 30, 40, 40}, CellCategory::schizont},
                   {{40, 40, 50, 50}, CellCategory::difficult}}};
    const auto binary = collapse_to_infected({r});
    REQUIRE(binary.size() == 1);
    CHECK(binary[0].boxes == std::vector<BoundingBox>{{10, 10, 20, 20}, {30, 30, 40, 40}});
    for (const auto& l : binary[0].labels) CHECK(l == DetectionLabel{InfectionLabel::infected});

    const auto staged = stage_targets({r});
    REQUIRE(staged[0].labels.size() == 2);
    CHECK(staged[0].labels[0] == DetectionLabel{StageLabel::ring});
    CHECK(staged[0].labels[1] == DetectionLabel{StageLabel::schizont});
}

TEST_CASE("labels and class modes round-trip through strings") {
    for (auto s : kStageOrder) CHECK(label_from_string(label_to_string(s)) == DetectionLabel{s});
    CHECK(label_from_string("infected") == DetectionLabel{InfectionLabel::infected});
    CHECK_THROWS_AS(label_from_string("merozoite"), ValidationError);
    CHECK(class_mode_from_string(to_string(ClassMode::multiclass_stage)) == ClassMode::multiclass_stage);
    CHECK_THROWS_AS(class_mode_from_string("three_class"), ConfigError);
}

TEST_CASE("unknown backend and missing dnn weights are config errors") {
    CHECK_THROWS_AS(detector_backend("yolo"), ConfigError);
    const auto& corpus = testutil::SharedCorpus::get();
    CHECK_THROWS_AS(train_detector(corpus.records, corpus.dir.path(), DetectorConfig{}, detector_backend("dnn")),
                    ConfigError);
    CHECK_THROWS_AS(train_detector(corpus.records, corpus.dir.path(), DetectorConfig{}, detector_backend("dnn"),
                                   {{"weights", "/nonexistent/frozen.pb"}}),
                    ConfigError);
}

TEST_CASE("reference detector finds nothing on a blank slide") {
    const cv::Mat blank(256, 256, CV_8UC3, cv::Scalar(215, 225, 235));
    CHECK(detect(shared_detector(ClassMode::binary_infected), blank, DetectorConfig{}).empty());
    CHECK(detect(shared_detector(ClassMode::multiclass_stage), blank, DetectorConfig{}).empty());
}

TEST_CASE("reference detector localizes planted infected cells") {
    auto spec = default_synth_spec();
    spec.counts[CellCategory::ring] = 2;
    spec.counts[CellCategory::red_blood_cell] = 6;
    spec.seed = 991;
    const auto slide = generate_slide(spec, "planted");
    const auto truth = collapse_to_infected({slide.record});
    REQUIRE(truth[0].boxes.size() == 5);

    const auto dets = detect(shared_detector(ClassMode::binary_infected), slide.image, DetectorConfig{});
    const auto match = match_detections(dets, truth[0].boxes, 0.5);
    CHECK(match.true_positives() == 5);
    CHECK(match.false_positives() == 0);
    for (const auto& d : dets) CHECK(d.label == DetectionLabel{InfectionLabel::infected});
}

TEST_CASE("detect rejects malformed images") {
    const cv::Mat gray(32, 32, CV_8UC1, cv::Scalar(0));
    CHECK_THROWS_AS(detect(shared_detector(ClassMode::binary_infected), gray, DetectorConfig{}), ValidationError);
    CHECK_THROWS_AS(detect(shared_detector(ClassMode::binary_infected), cv::Mat(), DetectorConfig{}),
                    ValidationError);
}

TEST_CASE("detector models round-trip through disk and stay deterministic") {
    testutil::TempDir dir("detmodel");
    const auto& model = shared_detector(ClassMode::multiclass_stage);
    save_detector_model(dir / "m.json", model);
    const auto loaded = load_detector_model(dir / "m.json");
    CHECK(loaded.backend == model.backend);
    CHECK(loaded.class_mode == model.class_mode);
    CHECK(loaded.fingerprint == model.fingerprint);

    const auto& corpus = testutil::SharedCorpus::get();
    const cv::Mat image = load_slide_image(resolve_image_path(corpus.dir.path(), corpus.records[0]));
    const auto a = detect(model, image, DetectorConfig{});
    CHECK(a == detect(loaded, image, DetectorConfig{}));
    for (const auto& d : a) CHECK(std::holds_alternative<StageLabel>(d.label));

    const auto& c2 = testutil::SharedCorpus::get();
    DetectorConfig config;
    config.class_mode = ClassMode::multiclass_stage;
    const auto retrained = train_detector(c2.records, c2.dir.path(), config, detector_backend("reference"));
    CHECK(retrained.parameters == model.parameters);
}

TEST_CASE("loading a corrupt detector model fails cleanly") {
    testutil::TempDir dir("badmodel");
    { std::ofstream(dir / "bad.json") << "{\"format\": \"something-else\"}"; }
    CHECK_THROWS_AS(load_detector_model(dir / "bad.json"), ParseError);
    CHECK_THROWS_AS(load_detector_model(dir / "missing.json"), IoError);
}
