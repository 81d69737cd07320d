#include "malaria/features.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/dnn.hpp>

#include "malaria/errors.hpp"

namespace malaria {

FeatureVector::FeatureVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.size() != kLength) {
        throw ValidationError("feature vector must have length " + std::to_string(kLength) + ", got " +
                              std::to_string(values_.size()));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!std::isfinite(values_[i])) {
            throw ValidationError("feature vector entry " + std::to_string(i) + " is not finite");
        }
    }
}

namespace {

constexpr int kFineGrid = 8;
constexpr int kCoarseGrid = 4;
constexpr int kChannelBins = 8;
constexpr int kJointLevels = 4;
constexpr std::size_t kFineOffset = 0;
constexpr std::size_t kCoarseOffset = kFineGrid * kFineGrid * 6;
constexpr std::size_t kJointOffset = kCoarseOffset + kCoarseGrid * kCoarseGrid * 3 * kChannelBins;

int level(float v, int levels) {
    return std::clamp(static_cast<int>(std::floor(v * static_cast<float>(levels))), 0, levels - 1);
}

void check_crop(const CellCrop& crop, int expected) {
    if (crop.pixels.type() != CV_32FC3) throw ValidationError("crop must be CV_32FC3");
    if (crop.pixels.rows != expected || crop.pixels.cols != expected) {
        throw ValidationError("crop is " + std::to_string(crop.pixels.rows) + "x" +
                              std::to_string(crop.pixels.cols) + ", backend expects " +
                              std::to_string(expected) + "x" + std::to_string(expected));
    }
}

} // namespace

ReferenceFeatureBackend::ReferenceFeatureBackend(int crop_size) : crop_size_(crop_size) {
    if (crop_size < kFineGrid) throw ConfigError("reference feature backend needs crops of at least 8 pixels");
}

FeatureVector ReferenceFeatureBackend::extract(const CellCrop& crop) const {
    check_crop(crop, crop_size_);
    const int n = crop_size_;
    std::vector<double> out(FeatureVector::kLength, 0.0);

    for (int pr = 0; pr < kFineGrid; ++pr) {
        for (int pc = 0; pc < kFineGrid; ++pc) {
            const int r0 = pr * n / kFineGrid, r1 = (pr + 1) * n / kFineGrid;
            const int c0 = pc * n / kFineGrid, c1 = (pc + 1) * n / kFineGrid;
            std::array<double, 3> sum{}, sq{};
            for (int r = r0; r < r1; ++r) {
                const auto* row = crop.pixels.ptr<cv::Vec3f>(r);
                for (int c = c0; c < c1; ++c) {
                    for (int ch = 0; ch < 3; ++ch) {
                        sum[ch] += row[c][ch];
                        sq[ch] += static_cast<double>(row[c][ch]) * row[c][ch];
                    }
                }
            }
            const double count = static_cast<double>((r1 - r0) * (c1 - c0));
            const std::size_t base = kFineOffset + static_cast<std::size_t>(pr * kFineGrid + pc) * 6;
            for (int ch = 0; ch < 3; ++ch) {
                const double mean = sum[ch] / count;
                out[base + ch] = mean;
                out[base + 3 + ch] = std::max(0.0, sq[ch] / count - mean * mean);
            }
        }
    }

    for (int pr = 0; pr < kCoarseGrid; ++pr) {
        for (int pc = 0; pc < kCoarseGrid; ++pc) {
            const int r0 = pr * n / kCoarseGrid, r1 = (pr + 1) * n / kCoarseGrid;
            const int c0 = pc * n / kCoarseGrid, c1 = (pc + 1) * n / kCoarseGrid;
            const double count = static_cast<double>((r1 - r0) * (c1 - c0));
            const std::size_t base =
                kCoarseOffset + static_cast<std::size_t>(pr * kCoarseGrid + pc) * 3 * kChannelBins;
            for (int r = r0; r < r1; ++r) {
                const auto* row = crop.pixels.ptr<cv::Vec3f>(r);
                for (int c = c0; c < c1; ++c) {
                    for (int ch = 0; ch < 3; ++ch) {
                        out[base + static_cast<std::size_t>(ch * kChannelBins + level(row[c][ch], kChannelBins))] +=
                            1.0 / count;
                    }
                }
            }
        }
    }

    const double total = static_cast<double>(n) * n;
    for (int r = 0; r < n; ++r) {
        const auto* row = crop.pixels.ptr<cv::Vec3f>(r);
        for (int c = 0; c < n; ++c) {
            const int bin = level(row[c][0], kJointLevels) * kJointLevels * kJointLevels +
                            level(row[c][1], kJointLevels) * kJointLevels + level(row[c][2], kJointLevels);
            out[kJointOffset + static_cast<std::size_t>(bin)] += 1.0 / total;
        }
    }
    return FeatureVector(std::move(out));
}

struct ResNetFeatureBackend::Impl {
    cv::dnn::Net net;
};

ResNetFeatureBackend::ResNetFeatureBackend(const std::filesystem::path& onnx_weights, int crop_size)
    : impl_(std::make_unique<Impl>()), crop_size_(crop_size) {
    const std::string hint =
        "export torchvision's pretrained resnet50 with the fc layer replaced by Identity to ONNX "
        "(input 1x3x" + std::to_string(crop_size) + "x" + std::to_string(crop_size) +
        ", output 1x2048) and set feature_weights in the config";
    if (onnx_weights.empty()) throw ConfigError("resnet50 feature backend: no weights given; " + hint);
    if (!std::filesystem::exists(onnx_weights)) {
        throw ConfigError("resnet50 feature backend: " + onnx_weights.string() + " not found; " + hint);
    }
    try {
        impl_->net = cv::dnn::readNetFromONNX(onnx_weights.string());
    } catch (const cv::Exception& e) {
        throw ConfigError("resnet50 feature backend: cannot load " + onnx_weights.string() + ": " + e.what());
    }
}

ResNetFeatureBackend::~ResNetFeatureBackend() = default;

FeatureVector ResNetFeatureBackend::extract(const CellCrop& crop) const {
    check_crop(crop, crop_size_);
    static const cv::Scalar kMean(0.485, 0.456, 0.406);
    static const cv::Scalar kStd(0.229, 0.224, 0.225);
    cv::Mat normalized = crop.pixels - kMean;
    cv::divide(normalized, kStd, normalized);
    cv::Mat blob = cv::dnn::blobFromImage(normalized);
    impl_->net.setInput(blob);
    const cv::Mat out = impl_->net.forward();
    if (out.total() != FeatureVector::kLength) {
        throw ConfigError("resnet50 feature backend: network produced " + std::to_string(out.total()) +
                          " values, expected 2048 (was the classification head removed?)");
    }
    std::vector<double> values(FeatureVector::kLength);
    const float* data = out.ptr<float>();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = data[i];
    return FeatureVector(std::move(values));
}

std::unique_ptr<FeatureBackend> make_feature_backend(std::string_view id, int crop_size,
                                                     const std::filesystem::path& weights) {
    if (id == "reference") return std::make_unique<ReferenceFeatureBackend>(crop_size);
    if (id == "resnet50") return std::make_unique<ResNetFeatureBackend>(weights, crop_size);
    throw ConfigError("unknown feature backend '" + std::string(id) + "' (expected reference or resnet50)");
}

FeatureVector extract_features(const CellCrop& crop, const FeatureBackend& backend) {
    check_crop(crop, backend.crop_size());
    return backend.extract(crop);
}

} // namespace malaria
