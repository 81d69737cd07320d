// Independent reference implementations used to cross-check the library.
// These are deliberately naive: pixel enumeration, brute-force search and
// direct numeric integration.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "malaria/classifier.hpp"
#include "malaria/detection.hpp"
#include "malaria/rng.hpp"
#include "malaria/types.hpp"

namespace oracle {

using malaria::BoundingBox;
using malaria::Detection;

inline bool contains(const BoundingBox& b, int r, int c) {
    return r >= b.min_row && r < b.max_row && c >= b.min_col && c < b.max_col;
}

/// IoU by counting pixels over the bounding grid of both boxes.
inline double pixel_iou(const BoundingBox& a, const BoundingBox& b) {
    const int r0 = std::min(a.min_row, b.min_row), r1 = std::max(a.max_row, b.max_row);
    const int c0 = std::min(a.min_col, b.min_col), c1 = std::max(a.max_col, b.max_col);
    std::int64_t inter = 0, uni = 0;
    for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) {
            const bool in_a = contains(a, r, c), in_b = contains(b, r, c);
            inter += in_a && in_b;
            uni += in_a || in_b;
        }
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Detection indices by descending score; equal scores keep input order.
inline std::vector<std::size_t> rank(const std::vector<Detection>& dets) {
    std::vector<std::size_t> order;
    std::vector<bool> used(dets.size(), false);
    for (std::size_t step = 0; step < dets.size(); ++step) {
        std::optional<std::size_t> pick;
        for (std::size_t i = 0; i < dets.size(); ++i) {
            if (!used[i] && (!pick || dets[i].score > dets[*pick].score)) pick = i;
        }
        used[*pick] = true;
        order.push_back(*pick);
    }
    return order;
}

struct Match {
    std::vector<bool> tp;
    std::vector<std::optional<std::size_t>> gt_of;
};

/// Greedy matching: each detection in rank order claims the unclaimed ground
/// truth of highest IoU (first on ties) if that IoU reaches the threshold.
inline Match greedy_match(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gts, double thr) {
    Match m{std::vector<bool>(dets.size(), false), std::vector<std::optional<std::size_t>>(dets.size())};
    std::set<std::size_t> claimed;
    for (auto d : rank(dets)) {
        double best = -1.0;
        std::optional<std::size_t> arg;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (claimed.count(g)) continue;
            const double v = pixel_iou(dets[d].bbox, gts[g]);
            if (v > best) {
                best = v;
                arg = g;
            }
        }
        if (arg && best >= thr) {
            m.tp[d] = true;
            m.gt_of[d] = arg;
            claimed.insert(*arg);
        }
    }
    return m;
}

/// Area under the interpolated precision envelope, integrated over the
/// distinct recall levels.
inline double staircase_ap(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gts, double thr) {
    if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
    const auto m = greedy_match(dets, gts, thr);
    std::vector<double> recall, precision;
    std::size_t tp = 0, seen = 0;
    for (auto d : rank(dets)) {
        ++seen;
        tp += m.tp[d];
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    }
    std::set<double> levels(recall.begin(), recall.end());
    double area = 0.0, prev = 0.0;
    for (double level : levels) {
        double env = 0.0;
        for (std::size_t i = 0; i < recall.size(); ++i) {
            if (recall[i] >= level) env = std::max(env, precision[i]);
        }
        area += (level - prev) * env;
        prev = level;
    }
    return area;
}

/// Brute-force NMS: repeatedly keep the best remaining detection and drop
/// everything overlapping it by more than the threshold.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double thr) {
    std::vector<bool> alive(dets.size(), true), kept(dets.size(), false);
    for (auto i : rank(dets)) {
        if (!alive[i]) continue;
        kept[i] = true;
        for (std::size_t j = 0; j < dets.size(); ++j) {
            if (j != i && alive[j] && !kept[j] && pixel_iou(dets[i].bbox, dets[j].bbox) > thr) alive[j] = false;
        }
    }
    std::vector<Detection> out;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (kept[i]) out.push_back(dets[i]);
    }
    return out;
}

inline BoundingBox random_box(malaria::Rng& rng, int extent, int max_side) {
    const int h = rng.uniform_int(1, max_side), w = rng.uniform_int(1, max_side);
    const int r = rng.uniform_int(0, extent - h), c = rng.uniform_int(0, extent - w);
    return {r, c, r + h, c + w};
}

/// Forward pass written with explicit loops over neurons.
inline std::vector<double> forward_probabilities(const malaria::ClassifierModel& model, const std::vector<double>& x) {
    std::vector<double> a = x;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        std::vector<double> z(static_cast<std::size_t>(layer.weights.rows()));
        for (Eigen::Index o = 0; o < layer.weights.rows(); ++o) {
            double s = layer.bias(o);
            for (Eigen::Index i = 0; i < layer.weights.cols(); ++i) s += layer.weights(o, i) * a[static_cast<std::size_t>(i)];
            z[static_cast<std::size_t>(o)] = (l + 1 < model.layers.size()) ? std::max(0.0, s) : s;
        }
        a = std::move(z);
    }
    const double m = *std::max_element(a.begin(), a.end());
    double sum = 0.0;
    for (auto& v : a) sum += (v = std::exp(v - m));
    for (auto& v : a) v /= sum;
    return a;
}

/// Mean cross-entropy of a batch, computed row by row.
inline double loss(const malaria::ClassifierModel& model, const Eigen::MatrixXd& x, const std::vector<int>& y) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(x.cols()));
        for (Eigen::Index j = 0; j < x.cols(); ++j) row[static_cast<std::size_t>(j)] = x(i, j);
        total -= std::log(forward_probabilities(model, row)[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])]);
    }
    return total / static_cast<double>(x.rows());
}

} // namespace oracle
