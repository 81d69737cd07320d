#include <doctest.h>

#include <cmath>

#include "malaria/errors.hpp"
#include "malaria/metrics.hpp"
#include "malaria/rng.hpp"
#include "oracles.hpp"

using namespace malaria;

namespace {

Detection det(BoundingBox b, double score) { return {b, score, InfectionLabel::infected}; }

std::vector<StageLabel> random_labels(Rng& rng, std::size_t n) {
    std::vector<StageLabel> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(kStageOrder[rng.uniform_index(kNumStages)]);
    return out;
}

} // namespace

TEST_CASE("iou of hand-computed boxes") {
    CHECK(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0);
    CHECK(iou({0, 0, 10, 10}, {10, 10, 20, 20}) == 0.0);
    CHECK(iou({0, 0, 10, 10}, {0, 5, 10, 15}) == doctest::Approx(50.0 / 150.0));
    CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("iou is symmetric, bounded and agrees with pixel counting") {
    Rng rng(11);
    for (int t = 0; t < 500; ++t) {
        const auto a = oracle::random_box(rng, 30, 20);
        const auto b = oracle::random_box(rng, 30, 20);
        const double v = iou(a, b);
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == oracle::pixel_iou(a, b));
    }
}

TEST_CASE("match_detections follows greedy score order") {
    const std::vector<BoundingBox> gts{{0, 0, 10, 10}, {20, 20, 30, 30}};
    const std::vector<Detection> dets{det({0, 0, 10, 10}, 0.6), det({1, 1, 10, 10}, 0.9), det({20, 20, 30, 30}, 0.5)};
    const auto m = match_detections(dets, gts, 0.5);
    // the 0.9 box claims GT 0 first, so the exact 0.6 box becomes a false positive
    CHECK_FALSE(m.detection_is_tp[0]);
    CHECK(m.detection_is_tp[1]);
    CHECK(m.detection_is_tp[2]);
    CHECK(m.true_positives() == 2);
    CHECK(m.false_positives() == 1);
    CHECK(m.missed() == 0);
    CHECK(detection_recall(m) == 1.0);
}

TEST_CASE("match_detections agrees with the brute-force greedy oracle") {
    Rng rng(12);
    for (int t = 0; t < 300; ++t) {
        std::vector<Detection> dets;
        std::vector<BoundingBox> gts;
        const auto nd = rng.uniform_index(9), ng = rng.uniform_index(6);
        for (std::size_t i = 0; i < nd; ++i) {
            dets.push_back(det(oracle::random_box(rng, 30, 20), static_cast<double>(rng.uniform_int(0, 5)) / 5.0));
        }
        for (std::size_t i = 0; i < ng; ++i) gts.push_back(oracle::random_box(rng, 30, 20));
        const double thr = rng.uniform(0.1, 0.7);
        const auto m = match_detections(dets, gts, thr);
        const auto o = oracle::greedy_match(dets, gts, thr);
        CHECK(m.detection_is_tp == o.tp);
        CHECK(m.detection_matched_gt == o.gt_of);
        CHECK(m.true_positives() <= std::min(dets.size(), gts.size()));
    }
}

TEST_CASE("average precision edge cases") {
    const std::vector<BoundingBox> gts{{0, 0, 10, 10}, {20, 20, 30, 30}};
    const std::vector<BoundingBox> none;
    const std::vector<Detection> empty;
    CHECK(average_precision(empty, none, 0.5) == 1.0);
    const std::vector<Detection> one{det({0, 0, 5, 5}, 0.5)};
    CHECK(average_precision(one, none, 0.5) == 0.0);
    CHECK(average_precision(empty, gts, 0.5) == 0.0);

    const std::vector<Detection> perfect{det(gts[0], 0.9), det(gts[1], 0.8)};
    CHECK(average_precision(perfect, gts, 0.5) == 1.0);

    // one TP ranked below one FP: envelope precision 0.5 over recall [0, 0.5]
    const std::vector<Detection> mixed{det({50, 50, 60, 60}, 0.9), det(gts[0], 0.8)};
    CHECK(average_precision(mixed, gts, 0.5) == doctest::Approx(0.25));
}

TEST_CASE("average precision agrees with the staircase oracle") {
    Rng rng(13);
    for (int t = 0; t < 300; ++t) {
        std::vector<Detection> dets;
        std::vector<BoundingBox> gts;
        const auto nd = rng.uniform_index(9), ng = rng.uniform_index(6);
        for (std::size_t i = 0; i < nd; ++i) dets.push_back(det(oracle::random_box(rng, 25, 20), rng.uniform01()));
        for (std::size_t i = 0; i < ng; ++i) gts.push_back(oracle::random_box(rng, 25, 20));
        const double ap = average_precision(dets, gts, 0.5);
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);
        CHECK(std::abs(ap - oracle::staircase_ap(dets, gts, 0.5)) <= 1e-9);
    }
}

TEST_CASE("pr curve recall is non-decreasing") {
    Rng rng(14);
    std::vector<ImageEvaluation> images(3);
    for (auto& im : images) {
        for (int i = 0; i < 6; ++i) im.detections.push_back(det(oracle::random_box(rng, 40, 15), rng.uniform01()));
        for (int i = 0; i < 4; ++i) im.ground_truths.push_back(oracle::random_box(rng, 40, 15));
    }
    const auto curve = pr_curve(images, 0.3);
    CHECK(curve.size() == 18);
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].recall >= curve[i - 1].recall);
    for (const auto& p : curve) {
        CHECK(p.precision >= 0.0);
        CHECK(p.precision <= 1.0);
    }
}

TEST_CASE("mean average precision") {
    const std::vector<double> aps{0.5, 1.0, 0.75, 0.25};
    CHECK(mean_average_precision(aps) == doctest::Approx(0.625));
    CHECK_THROWS_AS(mean_average_precision(std::vector<double>{}), ValidationError);
}

TEST_CASE("detection recall renders as two decimals") {
    MatchResult m;
    m.gt_matched.assign(100, false);
    m.detection_is_tp.assign(80, false);
    for (std::size_t i = 0; i < 69; ++i) m.gt_matched[i] = m.detection_is_tp[i] = true;
    CHECK(format_metric(detection_recall(m)) == "0.69");
}

TEST_CASE("f1 and rendering") {
    CHECK(format_metric(f1_score(0.91, 0.77)) == "0.83");
    CHECK(format_metric(f1_score(0.87, 0.87)) == "0.87");
    CHECK(f1_score(0.0, 0.0) == 0.0);
}

TEST_CASE("classification report identities on random predictions") {
    Rng rng(15);
    for (int t = 0; t < 200; ++t) {
        const auto n = 1 + rng.uniform_index(60);
        const auto truths = random_labels(rng, n);
        auto preds = random_labels(rng, n);
        for (std::size_t i = 0; i < n; ++i) {
            if (rng.uniform01() < 0.5) preds[i] = truths[i];
        }
        const auto r = classification_report(truths, preds);
        CHECK(r.weighted_avg.recall == r.accuracy);
        double f1_sum = 0.0;
        std::size_t support = 0, trace = 0;
        for (std::size_t k = 0; k < kNumStages; ++k) {
            f1_sum += r.per_class[k].f1;
            support += r.per_class[k].support;
            trace += r.confusion[k][k];
        }
        CHECK(std::abs(r.macro_avg.f1 - f1_sum / 4.0) <= 1e-12);
        CHECK(support == n);
        CHECK(r.total == n);
        CHECK(r.accuracy == static_cast<double>(trace) / static_cast<double>(n));
    }
}

TEST_CASE("classification report on a known confusion") {
    using S = StageLabel;
    const std::vector<S> truths{S::ring, S::ring, S::ring, S::schizont, S::gametocyte, S::trophozoite};
    const std::vector<S> preds{S::ring, S::ring, S::schizont, S::schizont, S::gametocyte, S::ring};
    const auto r = classification_report(truths, preds);
    const auto& ring = r.per_class[stage_index(S::ring)];
    CHECK(ring.precision == doctest::Approx(2.0 / 3.0));
    CHECK(ring.recall == doctest::Approx(2.0 / 3.0));
    CHECK(ring.support == 3);
    CHECK(r.per_class[stage_index(S::trophozoite)].precision == 0.0);
    CHECK(r.per_class[stage_index(S::trophozoite)].f1 == 0.0);
    CHECK(r.accuracy == doctest::Approx(4.0 / 6.0));
    CHECK(r.confusion[stage_index(S::trophozoite)][stage_index(S::ring)] == 1);

    const auto text = render_report(r);
    CHECK(text.find("Ring") != std::string::npos);
    CHECK(text.find("Macro avg") != std::string::npos);
    CHECK(text.find("Weighted avg") != std::string::npos);
    CHECK(text.find("0.67") != std::string::npos);

    const auto j = to_json(r);
    CHECK(j.at("per_class").contains("ring"));
    CHECK(j.at("accuracy").get<double>() == r.accuracy);
}

TEST_CASE("classification report rejects bad input") {
    const std::vector<StageLabel> a{StageLabel::ring};
    const std::vector<StageLabel> b;
    CHECK_THROWS_AS(classification_report(a, b), ValidationError);
    CHECK_THROWS_AS(classification_report(b, b), ValidationError);
    const std::vector<std::string> s1{"ring"}, s2{"merozoite"};
    CHECK_THROWS_AS(classification_report(s1, s2), ValidationError);
}
