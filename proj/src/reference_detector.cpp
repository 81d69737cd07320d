// Reference detector backend: a deterministic color/blob segmenter.
//
// Foreground is every pixel far enough from the slide's median (background)
// color; 8-connected foreground components are the candidate cells. Training
// learns which quantized colors occur inside target boxes far more often than
// in the rest of the foreground ("parasite colors"), and a logistic score over
// the fraction of parasite-colored pixels in a component.
//
// In multiclass mode each component is additionally described the way a
// region-pooling detector head sees it: the image is notionally rescaled so
// its shorter side is 600 px, the parasite-color map is max-pooled at stride
// 16 of that scale and the component's region is max-pooled again onto a 7x7
// grid. Stage labels come from the nearest per-class centroid of that
// descriptor.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "malaria/detection.hpp"
#include "malaria/errors.hpp"
#include "malaria/metrics.hpp"

namespace malaria {

namespace {

constexpr int kLevels = 8;
constexpr int kBinWidth = 256 / kLevels;
constexpr int kBins = kLevels * kLevels * kLevels;
constexpr double kDefaultForegroundThreshold = 40.0;
constexpr double kParasiteRatio = 4.0;
constexpr double kMinBinMass = 1e-3;
constexpr int kFeatureStride = 16;
constexpr int kPoolSize = 7;
constexpr double kInputShortSide = 600.0;
constexpr double kMatchIou = 0.5;

int color_bin(const cv::Vec3b& bgr) {
    return (bgr[0] / kBinWidth) * kLevels * kLevels + (bgr[1] / kBinWidth) * kLevels + bgr[2] / kBinWidth;
}

cv::Vec3d median_color(const cv::Mat& image) {
    std::array<std::array<std::size_t, 256>, 3> hist{};
    for (int r = 0; r < image.rows; ++r) {
        const auto* row = image.ptr<cv::Vec3b>(r);
        for (int c = 0; c < image.cols; ++c) {
            for (int ch = 0; ch < 3; ++ch) ++hist[ch][row[c][ch]];
        }
    }
    const std::size_t half = (image.total() + 1) / 2;
    cv::Vec3d out;
    for (int ch = 0; ch < 3; ++ch) {
        std::size_t acc = 0;
        for (int v = 0; v < 256; ++v) {
            acc += hist[ch][v];
            if (acc >= half) {
                out[ch] = v;
                break;
            }
        }
    }
    return out;
}

struct Component {
    BoundingBox bbox;
    int label{0};
    int area{0};
};

struct Segmentation {
    cv::Mat labels;
    std::vector<Component> components;
};

Segmentation segment(const cv::Mat& image, double fg_threshold, int min_area) {
    const cv::Vec3d bg = median_color(image);
    cv::Mat mask(image.size(), CV_8U, cv::Scalar(0));
    const double thr2 = fg_threshold * fg_threshold;
    for (int r = 0; r < image.rows; ++r) {
        const auto* px = image.ptr<cv::Vec3b>(r);
        auto* m = mask.ptr<std::uint8_t>(r);
        for (int c = 0; c < image.cols; ++c) {
            double d2 = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
                const double d = px[c][ch] - bg[ch];
                d2 += d * d;
            }
            m[c] = d2 > thr2 ? 255 : 0;
        }
    }
    Segmentation seg;
    cv::Mat stats;
    cv::Mat centroids;
    const int n = cv::connectedComponentsWithStats(mask, seg.labels, stats, centroids, 8, CV_32S);
    for (int i = 1; i < n; ++i) {
        const int area = stats.at<int>(i, cv::CC_STAT_AREA);
        if (area < min_area) continue;
        const int top = stats.at<int>(i, cv::CC_STAT_TOP);
        const int left = stats.at<int>(i, cv::CC_STAT_LEFT);
        seg.components.push_back({{top, left, top + stats.at<int>(i, cv::CC_STAT_HEIGHT),
                                   left + stats.at<int>(i, cv::CC_STAT_WIDTH)},
                                  i,
                                  area});
    }
    return seg;
}

/// Per-pixel parasite-color indicator over the whole image (foreground only).
cv::Mat parasite_map(const cv::Mat& image, const cv::Mat& labels, const std::vector<bool>& parasite_bins) {
    cv::Mat map(image.size(), CV_8U, cv::Scalar(0));
    for (int r = 0; r < image.rows; ++r) {
        const auto* px = image.ptr<cv::Vec3b>(r);
        const auto* lab = labels.ptr<int>(r);
        auto* m = map.ptr<std::uint8_t>(r);
        for (int c = 0; c < image.cols; ++c) {
            m[c] = (lab[c] != 0 && parasite_bins[static_cast<std::size_t>(color_bin(px[c]))]) ? 1 : 0;
        }
    }
    return map;
}

double parasite_fraction(const cv::Mat& map, const cv::Mat& labels, const Component& comp) {
    int hits = 0;
    for (int r = comp.bbox.min_row; r < comp.bbox.max_row; ++r) {
        const auto* lab = labels.ptr<int>(r);
        const auto* m = map.ptr<std::uint8_t>(r);
        for (int c = comp.bbox.min_col; c < comp.bbox.max_col; ++c) {
            if (lab[c] == comp.label && m[c]) ++hits;
        }
    }
    return comp.area > 0 ? static_cast<double>(hits) / comp.area : 0.0;
}

/// Feature-map stride in original-image pixels.
double effective_stride(const cv::Mat& image) {
    return kFeatureStride * std::min(image.rows, image.cols) / kInputShortSide;
}

int to_cell(int pixel, double stride) { return static_cast<int>(std::floor(pixel / stride)); }

cv::Mat stride_pool(const cv::Mat& map, double stride) {
    const int rows = to_cell(map.rows - 1, stride) + 1;
    const int cols = to_cell(map.cols - 1, stride) + 1;
    cv::Mat pooled(rows, cols, CV_8U, cv::Scalar(0));
    for (int r = 0; r < map.rows; ++r) {
        const auto* m = map.ptr<std::uint8_t>(r);
        auto* p = pooled.ptr<std::uint8_t>(to_cell(r, stride));
        for (int c = 0; c < map.cols; ++c) {
            const int pc = to_cell(c, stride);
            p[pc] = std::max(p[pc], m[c]);
        }
    }
    return pooled;
}

std::vector<double> roi_descriptor(const cv::Mat& pooled, double stride, const BoundingBox& box, double fraction,
                                   double fraction_scale) {
    const int r0 = to_cell(box.min_row, stride);
    const int c0 = to_cell(box.min_col, stride);
    const int r1 = std::min(pooled.rows, to_cell(box.max_row - 1, stride) + 1);
    const int c1 = std::min(pooled.cols, to_cell(box.max_col - 1, stride) + 1);
    const int h = std::max(1, r1 - r0);
    const int w = std::max(1, c1 - c0);
    std::vector<double> out;
    out.reserve(kPoolSize * kPoolSize + 1);
    for (int p = 0; p < kPoolSize; ++p) {
        const int rs = r0 + (p * h) / kPoolSize;
        const int re = std::max(rs + 1, r0 + ((p + 1) * h + kPoolSize - 1) / kPoolSize);
        for (int q = 0; q < kPoolSize; ++q) {
            const int cs = c0 + (q * w) / kPoolSize;
            const int ce = std::max(cs + 1, c0 + ((q + 1) * w + kPoolSize - 1) / kPoolSize);
            std::uint8_t v = 0;
            for (int r = rs; r < std::min(re, pooled.rows); ++r) {
                for (int c = cs; c < std::min(ce, pooled.cols); ++c) v = std::max(v, pooled.at<std::uint8_t>(r, c));
            }
            out.push_back(v);
        }
    }
    out.push_back(fraction * fraction_scale);
    return out;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
    return values[idx];
}

/// Mean log-likelihood of the true centroid under softmax(-d2 / t).
double centroid_log_likelihood(const std::vector<std::vector<double>>& sq_dists, const std::vector<std::size_t>& truth,
                               double t) {
    double total = 0.0;
    for (std::size_t i = 0; i < sq_dists.size(); ++i) {
        const auto& row = sq_dists[i];
        const double m = *std::min_element(row.begin(), row.end());
        double z = 0.0;
        for (double d2 : row) z += std::exp(-(d2 - m) / t);
        total += -(row[truth[i]] - m) / t - std::log(z);
    }
    return sq_dists.empty() ? 0.0 : total / static_cast<double>(sq_dists.size());
}

/// Maximum-likelihood softmax temperature, searched on a log grid then
/// refined by golden section.
double fit_temperature(const std::vector<std::vector<double>>& sq_dists, const std::vector<std::size_t>& truth) {
    if (sq_dists.empty()) return 1.0;
    double best_log = 0.0;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (double lt = -6.0; lt <= 4.0; lt += 0.25) {
        const double ll = centroid_log_likelihood(sq_dists, truth, std::pow(10.0, lt));
        if (ll > best_ll) {
            best_ll = ll;
            best_log = lt;
        }
    }
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = best_log - 0.25;
    double b = best_log + 0.25;
    for (int it = 0; it < 40; ++it) {
        const double c = b - phi * (b - a);
        const double d = a + phi * (b - a);
        if (centroid_log_likelihood(sq_dists, truth, std::pow(10.0, c)) >=
            centroid_log_likelihood(sq_dists, truth, std::pow(10.0, d))) {
            b = d;
        } else {
            a = c;
        }
    }
    return std::pow(10.0, 0.5 * (a + b));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Params {
    double fg_threshold{kDefaultForegroundThreshold};
    int min_area{4};
    std::vector<bool> parasite_bins;
    double score_center{0.0};
    double score_slope{1.0};
    // multiclass only
    double fraction_scale{1.0};
    std::vector<std::vector<double>> centroids;
    std::vector<std::string> centroid_labels;
    double temperature{1.0};

    nlohmann::json to_json() const {
        std::vector<int> bins;
        for (int b = 0; b < kBins; ++b) {
            if (parasite_bins[static_cast<std::size_t>(b)]) bins.push_back(b);
        }
        nlohmann::json j{{"fg_threshold", fg_threshold},
                         {"min_area", min_area},
                         {"color_levels", kLevels},
                         {"parasite_bins", bins},
                         {"score_center", score_center},
                         {"score_slope", score_slope}};
        if (!centroids.empty()) {
            j["fraction_scale"] = fraction_scale;
            j["centroids"] = centroids;
            j["centroid_labels"] = centroid_labels;
            j["temperature"] = temperature;
            j["feature_stride"] = kFeatureStride;
            j["input_short_side"] = kInputShortSide;
            j["pool_size"] = kPoolSize;
        }
        return j;
    }

    static Params from_json(const nlohmann::json& j) {
        try {
            Params p;
            p.fg_threshold = j.at("fg_threshold").get<double>();
            p.min_area = j.at("min_area").get<int>();
            p.parasite_bins.assign(kBins, false);
            for (int b : j.at("parasite_bins").get<std::vector<int>>()) {
                if (b < 0 || b >= kBins) throw ParseError("reference detector: parasite bin out of range");
                p.parasite_bins[static_cast<std::size_t>(b)] = true;
            }
            p.score_center = j.at("score_center").get<double>();
            p.score_slope = j.at("score_slope").get<double>();
            if (j.contains("centroids")) {
                p.fraction_scale = j.at("fraction_scale").get<double>();
                p.centroids = j.at("centroids").get<std::vector<std::vector<double>>>();
                p.centroid_labels = j.at("centroid_labels").get<std::vector<std::string>>();
                p.temperature = j.at("temperature").get<double>();
            }
            return p;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("reference detector parameters: ") + e.what());
        }
    }
};

/// Index of the target best overlapping `box` with IoU >= kMatchIou, if any.
std::optional<std::size_t> matched_target(const SlideTargets& slide, const BoundingBox& box) {
    std::optional<std::size_t> best;
    double best_iou = kMatchIou;
    for (std::size_t t = 0; t < slide.boxes.size(); ++t) {
        const double v = iou(slide.boxes[t], box);
        if (v >= best_iou) {
            best_iou = v;
            best = t;
        }
    }
    return best;
}

class ReferenceDetectorBackend final : public DetectorBackend {
public:
    std::string_view id() const override { return "reference"; }

    nlohmann::json train(const TrainingCorpus& corpus, const DetectorConfig& config,
                         const nlohmann::json& options) const override {
        Params params;
        params.fg_threshold = options.value("fg_threshold", kDefaultForegroundThreshold);
        const auto& slides = corpus.slides();

        std::int64_t min_target_area = std::numeric_limits<std::int64_t>::max();
        for (const auto& s : slides) {
            for (const auto& b : s.boxes) min_target_area = std::min(min_target_area, b.area());
        }
        if (min_target_area == std::numeric_limits<std::int64_t>::max()) {
            throw ValidationError("reference detector: training set has no infected targets");
        }
        params.min_area = static_cast<int>(std::max<std::int64_t>(4, min_target_area / 4));

        // Pass 1: color statistics inside vs outside target boxes.
        std::vector<double> inside(kBins, 0.0);
        std::vector<double> outside(kBins, 0.0);
        for (std::size_t i = 0; i < slides.size(); ++i) {
            const cv::Mat image = corpus.load(i);
            const auto seg = segment(image, params.fg_threshold, 1);
            cv::Mat in_target(image.size(), CV_8U, cv::Scalar(0));
            for (const auto& b : slides[i].boxes) {
                const auto c = b.clipped_to(image.rows, image.cols);
                if (c.is_valid()) in_target(cv::Rect(c.min_col, c.min_row, c.width(), c.height())).setTo(1);
            }
            for (int r = 0; r < image.rows; ++r) {
                const auto* px = image.ptr<cv::Vec3b>(r);
                const auto* lab = seg.labels.ptr<int>(r);
                const auto* t = in_target.ptr<std::uint8_t>(r);
                for (int c = 0; c < image.cols; ++c) {
                    if (lab[c] == 0) continue;
                    (t[c] ? inside : outside)[static_cast<std::size_t>(color_bin(px[c]))] += 1.0;
                }
            }
        }
        const double in_total = std::accumulate(inside.begin(), inside.end(), 0.0);
        const double out_total = std::max(1.0, std::accumulate(outside.begin(), outside.end(), 0.0));
        params.parasite_bins.assign(kBins, false);
        for (std::size_t b = 0; b < static_cast<std::size_t>(kBins); ++b) {
            const double p_in = inside[b] / std::max(1.0, in_total);
            const double p_out = outside[b] / out_total;
            params.parasite_bins[b] = p_in >= kMinBinMass && p_in > kParasiteRatio * p_out;
        }

        // Pass 2: component-level features against the targets.
        std::vector<double> pos_fraction;
        std::vector<double> neg_fraction;
        struct Sample {
            cv::Mat pooled;
            double stride;
            BoundingBox box;
            double fraction;
            std::string label;
        };
        std::vector<Sample> stage_samples;
        for (std::size_t i = 0; i < slides.size(); ++i) {
            const cv::Mat image = corpus.load(i);
            const auto seg = segment(image, params.fg_threshold, params.min_area);
            const cv::Mat map = parasite_map(image, seg.labels, params.parasite_bins);
            const double stride = effective_stride(image);
            const cv::Mat pooled =
                config.class_mode == ClassMode::multiclass_stage ? stride_pool(map, stride) : cv::Mat();
            for (const auto& comp : seg.components) {
                const double f = parasite_fraction(map, seg.labels, comp);
                const auto t = matched_target(slides[i], comp.bbox);
                (t ? pos_fraction : neg_fraction).push_back(f);
                if (t && config.class_mode == ClassMode::multiclass_stage) {
                    stage_samples.push_back({pooled, stride, comp.bbox, f, label_to_string(slides[i].labels[*t])});
                }
            }
        }
        if (pos_fraction.empty()) {
            throw ValidationError("reference detector: no segmented component matched a target box");
        }
        const double pos_lo = quantile(pos_fraction, 0.05);
        const double neg_hi = quantile(neg_fraction, 0.95);
        if (pos_lo > neg_hi) {
            params.score_center = 0.5 * (pos_lo + neg_hi);
            params.score_slope = std::log(19.0) / (pos_lo - params.score_center);
        } else {
            const auto mean = [](const std::vector<double>& v) {
                return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            };
            const double mp = mean(pos_fraction);
            params.score_center = 0.5 * (mp + mean(neg_fraction));
            params.score_slope = std::log(19.0) / std::max(std::abs(mp - params.score_center), 1e-3);
        }

        if (config.class_mode == ClassMode::multiclass_stage) {
            const double mean_pos =
                std::accumulate(pos_fraction.begin(), pos_fraction.end(), 0.0) / static_cast<double>(pos_fraction.size());
            params.fraction_scale = mean_pos > 0.0 ? 1.0 / mean_pos : 1.0;
            for (auto s : kStageOrder) {
                const std::string name(to_string(s));
                std::vector<double> sum;
                std::size_t n = 0;
                for (const auto& sample : stage_samples) {
                    if (sample.label != name) continue;
                    const auto d =
                        roi_descriptor(sample.pooled, sample.stride, sample.box, sample.fraction, params.fraction_scale);
                    if (sum.empty()) sum.assign(d.size(), 0.0);
                    for (std::size_t k = 0; k < d.size(); ++k) sum[k] += d[k];
                    ++n;
                }
                if (n == 0) continue;
                for (auto& v : sum) v /= static_cast<double>(n);
                params.centroids.push_back(std::move(sum));
                params.centroid_labels.push_back(name);
            }
            std::vector<std::vector<double>> sq_dists;
            std::vector<std::size_t> truth;
            for (const auto& sample : stage_samples) {
                const auto d =
                    roi_descriptor(sample.pooled, sample.stride, sample.box, sample.fraction, params.fraction_scale);
                std::vector<double> row;
                for (const auto& c : params.centroids) {
                    double d2 = 0.0;
                    for (std::size_t k = 0; k < d.size(); ++k) d2 += (d[k] - c[k]) * (d[k] - c[k]);
                    row.push_back(d2);
                }
                sq_dists.push_back(std::move(row));
                const auto it = std::find(params.centroid_labels.begin(), params.centroid_labels.end(), sample.label);
                truth.push_back(static_cast<std::size_t>(it - params.centroid_labels.begin()));
            }
            params.temperature = fit_temperature(sq_dists, truth);
        }
        return params.to_json();
    }

    std::vector<Detection> propose(const DetectorModel& model, const cv::Mat& image) const override {
        const Params params = Params::from_json(model.parameters);
        const auto seg = segment(image, params.fg_threshold, params.min_area);
        const cv::Mat map = parasite_map(image, seg.labels, params.parasite_bins);
        const bool multiclass = model.class_mode == ClassMode::multiclass_stage;
        if (multiclass && params.centroids.empty()) {
            throw ConfigError("reference detector model has no stage centroids for multiclass mode");
        }
        const double stride = effective_stride(image);
        const cv::Mat pooled = multiclass ? stride_pool(map, stride) : cv::Mat();

        std::vector<Detection> out;
        for (const auto& comp : seg.components) {
            const double f = parasite_fraction(map, seg.labels, comp);
            const double infected = logistic(params.score_slope * (f - params.score_center));
            if (!multiclass) {
                out.push_back({comp.bbox, infected, InfectionLabel::infected});
                continue;
            }
            const auto d = roi_descriptor(pooled, stride, comp.bbox, f, params.fraction_scale);
            std::vector<double> logits;
            for (const auto& c : params.centroids) {
                double d2 = 0.0;
                for (std::size_t k = 0; k < d.size(); ++k) d2 += (d[k] - c[k]) * (d[k] - c[k]);
                logits.push_back(-d2 / params.temperature);
            }
            const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
            double z = 0.0;
            for (double l : logits) z += std::exp(l - logits[best]);
            out.push_back({comp.bbox, infected / z, label_from_string(params.centroid_labels[best])});
        }
        return out;
    }
};

} // namespace

const DetectorBackend& reference_detector_backend() {
    static const ReferenceDetectorBackend backend;
    return backend;
}

} // namespace malaria
