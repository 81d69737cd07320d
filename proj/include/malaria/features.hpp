#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "malaria/crop.hpp"

namespace malaria {

/// Backbone embedding of one crop. Always exactly kLength finite values.
class FeatureVector {
public:
    static constexpr std::size_t kLength = 2048;

    /// Throws ValidationError on wrong length or non-finite entries.
    explicit FeatureVector(std::vector<double> values);

    [[nodiscard]] std::span<const double> values() const { return values_; }
    [[nodiscard]] std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }

    friend bool operator==(const FeatureVector&, const FeatureVector&) = default;

private:
    std::vector<double> values_;
};

class FeatureBackend {
public:
    virtual ~FeatureBackend() = default;
    [[nodiscard]] virtual std::string_view id() const = 0;
    /// Side length the backend expects crops to have.
    [[nodiscard]] virtual int crop_size() const = 0;
    [[nodiscard]] virtual FeatureVector extract(const CellCrop& crop) const = 0;
};

/// Deterministic patch-statistics embedding. Layout, for an S x S crop:
///
///   [0, 384)     8x8 grid of patches; per patch mean R, G, B then variance R, G, B
///   [384, 768)   4x4 grid; per patch and channel an 8-bin histogram (bin width 1/8)
///   [768, 832)   global joint color histogram, 4 levels per channel (r*16 + g*4 + b)
///   [832, 2048)  zero padding
///
/// Histograms hold fractions of the patch's pixels. An all-zero crop maps to
/// the vector with 1.0 at index 384 + 8k for k in [0, 48) and at index 768,
/// and 0 elsewhere.
class ReferenceFeatureBackend final : public FeatureBackend {
public:
    explicit ReferenceFeatureBackend(int crop_size = kDefaultCropSize);

    std::string_view id() const override { return "reference"; }
    int crop_size() const override { return crop_size_; }
    FeatureVector extract(const CellCrop& crop) const override;

private:
    int crop_size_;
};

/// Frozen ResNet-50 without its classification head, loaded from an ONNX
/// export whose output is the 2048-channel global average pool. Crops are
/// normalized with the ImageNet channel mean/std before the forward pass.
class ResNetFeatureBackend final : public FeatureBackend {
public:
    /// Throws ConfigError with a remediation hint if the weights are missing.
    explicit ResNetFeatureBackend(const std::filesystem::path& onnx_weights, int crop_size = kDefaultCropSize);
    ~ResNetFeatureBackend() override;

    std::string_view id() const override { return "resnet50"; }
    int crop_size() const override { return crop_size_; }
    FeatureVector extract(const CellCrop& crop) const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int crop_size_;
};

/// "reference" or "resnet50"; anything else is a ConfigError.
std::unique_ptr<FeatureBackend> make_feature_backend(std::string_view id, int crop_size,
                                                     const std::filesystem::path& weights = {});

/// Convenience wrapper that validates the crop before delegating.
FeatureVector extract_features(const CellCrop& crop, const FeatureBackend& backend);

} // namespace malaria
