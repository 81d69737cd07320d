#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "malaria/features.hpp"
#include "malaria/types.hpp"

namespace malaria {

/// Fully connected layer computing W x + b; W is (out x in).
struct DenseLayer {
    Eigen::MatrixXd weights;
    Eigen::VectorXd bias;
};

/// Stage classifier: dense layers with ReLU between them and a softmax on the
/// last. The production shape is 2048 -> 512 -> 128 -> 32 -> 4, class order
/// gametocyte, ring, schizont, trophozoite.
struct ClassifierModel {
    std::vector<DenseLayer> layers;
    nlohmann::json fingerprint = nlohmann::json::object();
    /// Mean training loss per completed epoch.
    std::vector<double> loss_history;

    [[nodiscard]] std::vector<int> widths() const;
    [[nodiscard]] int input_size() const;
    [[nodiscard]] int output_size() const;
};

inline constexpr std::array<int, 5> kStageClassifierWidths{2048, 512, 128, 32, 4};

struct ClassifierTrainingConfig {
    int epochs{80};
    int batch_size{32};
    double learning_rate{0.003};
    double momentum{0.9};
    double weight_decay{1e-4};
    /// Early stop after this many epochs without a min_delta drop in loss.
    int patience{10};
    double min_delta{1e-4};
    std::uint64_t seed{0};
};

void validate(const ClassifierTrainingConfig& config);
nlohmann::json to_json(const ClassifierTrainingConfig& config);

/// He-initialized network with the given layer widths (input first).
ClassifierModel make_classifier(std::span<const int> widths, std::uint64_t seed);

/// Raw logits, one row per input row.
Eigen::MatrixXd forward_logits(const ClassifierModel& model, const Eigen::MatrixXd& inputs);

/// Row-wise numerically stable softmax.
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

struct LossAndGradients {
    double loss{0.0};
    std::vector<DenseLayer> gradients;
};

/// Mean cross-entropy over the rows of `inputs` and its exact gradients
/// (weight decay excluded).
LossAndGradients loss_and_gradients(const ClassifierModel& model, const Eigen::MatrixXd& inputs,
                                    std::span<const int> labels);

/// Mini-batch SGD with momentum on the cross-entropy loss, seeded shuffling
/// and early stopping on plateau. Throws ValidationError on fewer than two
/// distinct classes, shape mismatches or non-finite inputs.
ClassifierModel train_classifier(const Eigen::MatrixXd& inputs, std::span<const int> labels,
                                 std::span<const int> widths, const ClassifierTrainingConfig& config);

/// Stage classifier over 2048-dim features with the production widths.
ClassifierModel train_classifier(std::span<const FeatureVector> features, std::span<const StageLabel> labels,
                                 const ClassifierTrainingConfig& config);

struct StagePrediction {
    std::array<double, kNumStages> probabilities{};
    StageLabel predicted{StageLabel::gametocyte};
};

/// Argmax ties resolve to the earliest class in canonical order.
StagePrediction classify_crop(const ClassifierModel& model, const FeatureVector& features);

Eigen::MatrixXd stack_features(std::span<const FeatureVector> features);

/// Header line `MALARIA-CLASSIFIER 1`, a JSON line (class order, layer
/// shapes, fingerprint, loss history), then little-endian float64 weights
/// and biases layer by layer.
void save_classifier(const std::filesystem::path& path, const ClassifierModel& model);
ClassifierModel load_classifier(const std::filesystem::path& path);

/// Hash over the weights, for quick reproducibility checks.
std::string weights_digest(const ClassifierModel& model);

} // namespace malaria
