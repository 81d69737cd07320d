#include "malaria/classifier.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "malaria/errors.hpp"
#include "malaria/rng.hpp"

namespace malaria {

static_assert(std::endian::native == std::endian::little, "classifier files are written little-endian");

std::vector<int> ClassifierModel::widths() const {
    std::vector<int> w;
    if (layers.empty()) return w;
    w.push_back(static_cast<int>(layers.front().weights.cols()));
    for (const auto& l : layers) w.push_back(static_cast<int>(l.weights.rows()));
    return w;
}

int ClassifierModel::input_size() const {
    return layers.empty() ? 0 : static_cast<int>(layers.front().weights.cols());
}

int ClassifierModel::output_size() const {
    return layers.empty() ? 0 : static_cast<int>(layers.back().weights.rows());
}

void validate(const ClassifierTrainingConfig& c) {
    if (c.epochs <= 0) throw ValidationError("classifier epochs must be positive");
    if (c.batch_size <= 0) throw ValidationError("classifier batch_size must be positive");
    if (!(c.learning_rate > 0.0)) throw ValidationError("classifier learning_rate must be positive");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ValidationError("classifier momentum must lie in [0, 1)");
    if (!(c.weight_decay >= 0.0)) throw ValidationError("classifier weight_decay must be non-negative");
    if (c.patience <= 0) throw ValidationError("classifier patience must be positive");
    if (!(c.min_delta >= 0.0)) throw ValidationError("classifier min_delta must be non-negative");
}

nlohmann::json to_json(const ClassifierTrainingConfig& c) {
    return {{"epochs", c.epochs},     {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
            {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"patience", c.patience},
            {"min_delta", c.min_delta}, {"seed", c.seed}};
}

ClassifierModel make_classifier(std::span<const int> widths, std::uint64_t seed) {
    if (widths.size() < 2) throw ValidationError("classifier needs at least an input and an output width");
    for (int w : widths) {
        if (w <= 0) throw ValidationError("classifier layer widths must be positive");
    }
    Rng rng(seed);
    ClassifierModel model;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        const int in = widths[l];
        const int out = widths[l + 1];
        const double scale = std::sqrt(2.0 / in);
        DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
        for (int r = 0; r < out; ++r) {
            for (int c = 0; c < in; ++c) layer.weights(r, c) = scale * rng.normal();
        }
        model.layers.push_back(std::move(layer));
    }
    return model;
}

namespace {

/// Activations per layer input plus the final logits; pre-activations kept for backprop.
struct ForwardTrace {
    std::vector<Eigen::MatrixXd> inputs;
    std::vector<Eigen::MatrixXd> pre;
};

ForwardTrace forward_trace(const ClassifierModel& model, const Eigen::MatrixXd& x) {
    ForwardTrace t;
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        Eigen::MatrixXd z = a * layer.weights.transpose();
        z.rowwise() += layer.bias.transpose();
        t.inputs.push_back(std::move(a));
        a = l + 1 < model.layers.size() ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
        t.pre.push_back(std::move(z));
    }
    return t;
}

void check_inputs(const ClassifierModel& model, const Eigen::MatrixXd& x) {
    if (model.layers.empty()) throw ValidationError("classifier model has no layers");
    if (x.cols() != model.input_size()) {
        throw ValidationError("classifier expects " + std::to_string(model.input_size()) + " inputs, got " +
                              std::to_string(x.cols()));
    }
    if (!x.allFinite()) throw ValidationError("classifier inputs contain non-finite values");
}

std::string digest_bytes(const ClassifierModel& model) {
    std::string bytes;
    for (const auto& l : model.layers) {
        bytes.append(reinterpret_cast<const char*>(l.weights.data()),
                     static_cast<std::size_t>(l.weights.size()) * sizeof(double));
        bytes.append(reinterpret_cast<const char*>(l.bias.data()),
                     static_cast<std::size_t>(l.bias.size()) * sizeof(double));
    }
    return bytes;
}

} // namespace

Eigen::MatrixXd forward_logits(const ClassifierModel& model, const Eigen::MatrixXd& inputs) {
    check_inputs(model, inputs);
    return forward_trace(model, inputs).pre.back();
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

LossAndGradients loss_and_gradients(const ClassifierModel& model, const Eigen::MatrixXd& inputs,
                                    std::span<const int> labels) {
    check_inputs(model, inputs);
    if (static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
        throw ValidationError("loss_and_gradients: label count does not match input rows");
    }
    const auto trace = forward_trace(model, inputs);
    const Eigen::MatrixXd probs = softmax_rows(trace.pre.back());
    const auto n = static_cast<double>(inputs.rows());

    LossAndGradients out;
    Eigen::MatrixXd delta = probs;
    for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= probs.cols()) throw ValidationError("loss_and_gradients: label out of range");
        // log-softmax straight from the logits avoids log(0)
        const auto& z = trace.pre.back().row(r);
        const double m = z.maxCoeff();
        out.loss -= z(y) - m - std::log((z.array() - m).exp().sum());
        delta(r, y) -= 1.0;
    }
    out.loss /= n;
    delta /= n;

    out.gradients.resize(model.layers.size());
    for (std::size_t l = model.layers.size(); l-- > 0;) {
        out.gradients[l].weights = delta.transpose() * trace.inputs[l];
        out.gradients[l].bias = delta.colwise().sum().transpose();
        if (l > 0) {
            Eigen::MatrixXd back = delta * model.layers[l].weights;
            delta = back.array() * (trace.pre[l - 1].array() > 0.0).cast<double>();
        }
    }
    return out;
}

ClassifierModel train_classifier(const Eigen::MatrixXd& inputs, std::span<const int> labels,
                                 std::span<const int> widths, const ClassifierTrainingConfig& config) {
    validate(config);
    if (inputs.rows() == 0) throw ValidationError("train_classifier: empty dataset");
    if (static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
        throw ValidationError("train_classifier: label count does not match input rows");
    }
    if (!inputs.allFinite()) throw ValidationError("train_classifier: non-finite features");
    if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
        throw ValidationError("train_classifier: need at least two distinct classes");
    }

    ClassifierModel model = make_classifier(widths, derive_seed(config.seed, 1));
    check_inputs(model, inputs);
    for (int y : labels) {
        if (y < 0 || y >= model.output_size()) throw ValidationError("train_classifier: label out of range");
    }

    std::vector<DenseLayer> velocity;
    for (const auto& l : model.layers) {
        velocity.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                            Eigen::VectorXd::Zero(l.bias.size())});
    }

    Rng rng(derive_seed(config.seed, 2));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(inputs.rows()));
    std::iota(order.begin(), order.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    std::vector<DenseLayer> best_layers = model.layers;
    int best_epoch = 0;
    int stale = 0;
    int epochs_run = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            Eigen::MatrixXd batch(static_cast<Eigen::Index>(end - start), inputs.cols());
            std::vector<int> batch_labels;
            for (std::size_t i = start; i < end; ++i) {
                batch.row(static_cast<Eigen::Index>(i - start)) = inputs.row(order[i]);
                batch_labels.push_back(labels[static_cast<std::size_t>(order[i])]);
            }
            const auto lg = loss_and_gradients(model, batch, batch_labels);
            epoch_loss += lg.loss * static_cast<double>(end - start);
            for (std::size_t l = 0; l < model.layers.size(); ++l) {
                auto& layer = model.layers[l];
                auto& v = velocity[l];
                v.weights = config.momentum * v.weights -
                            config.learning_rate * (lg.gradients[l].weights + config.weight_decay * layer.weights);
                v.bias = config.momentum * v.bias - config.learning_rate * lg.gradients[l].bias;
                layer.weights += v.weights;
                layer.bias += v.bias;
            }
        }
        epoch_loss /= static_cast<double>(order.size());
        model.loss_history.push_back(epoch_loss);
        ++epochs_run;
        if (!std::isfinite(epoch_loss)) throw ValidationError("train_classifier: loss diverged");
        if (epoch_loss < best - config.min_delta) {
            best = epoch_loss;
            best_layers = model.layers;
            best_epoch = epoch + 1;
            stale = 0;
        } else if (++stale >= config.patience) {
            break;
        }
    }

    model.layers = std::move(best_layers);
    model.fingerprint = {{"widths", model.widths()},
                         {"training", to_json(config)},
                         {"epochs_run", epochs_run},
                         {"best_epoch", best_epoch},
                         {"samples", inputs.rows()},
                         {"weights_digest", weights_digest(model)}};
    model.fingerprint["hash"] = fingerprint_hex(model.fingerprint.dump());
    return model;
}

Eigen::MatrixXd stack_features(std::span<const FeatureVector> features) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), static_cast<Eigen::Index>(FeatureVector::kLength));
    for (std::size_t i = 0; i < features.size(); ++i) {
        const auto v = features[i].values();
        for (std::size_t j = 0; j < v.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
    }
    return x;
}

ClassifierModel train_classifier(std::span<const FeatureVector> features, std::span<const StageLabel> labels,
                                 const ClassifierTrainingConfig& config) {
    if (features.size() != labels.size()) throw ValidationError("train_classifier: features/labels size mismatch");
    std::vector<int> y;
    y.reserve(labels.size());
    for (auto s : labels) y.push_back(static_cast<int>(stage_index(s)));
    return train_classifier(stack_features(features), y, kStageClassifierWidths, config);
}

StagePrediction classify_crop(const ClassifierModel& model, const FeatureVector& features) {
    if (model.input_size() != static_cast<int>(FeatureVector::kLength) ||
        model.output_size() != static_cast<int>(kNumStages)) {
        throw ValidationError("classify_crop: model must map 2048 features to 4 stages");
    }
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(FeatureVector::kLength));
    const auto v = features.values();
    for (std::size_t j = 0; j < v.size(); ++j) x(0, static_cast<Eigen::Index>(j)) = v[j];
    const Eigen::MatrixXd p = softmax_rows(forward_logits(model, x));

    StagePrediction pred;
    std::size_t best = 0;
    for (std::size_t k = 0; k < kNumStages; ++k) {
        pred.probabilities[k] = p(0, static_cast<Eigen::Index>(k));
        if (pred.probabilities[k] > pred.probabilities[best]) best = k;
    }
    pred.predicted = kStageOrder[best];
    return pred;
}

std::string weights_digest(const ClassifierModel& model) { return fingerprint_hex(digest_bytes(model)); }

void save_classifier(const std::filesystem::path& path, const ClassifierModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write classifier model " + path.string());
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& l : model.layers) shapes.push_back({l.weights.rows(), l.weights.cols()});
    const nlohmann::json header{{"class_order", {"gametocyte", "ring", "schizont", "trophozoite"}},
                                {"layer_shapes", shapes},
                                {"activation", "relu"},
                                {"output", "softmax"},
                                {"fingerprint", model.fingerprint},
                                {"loss_history", model.loss_history}};
    out << "MALARIA-CLASSIFIER 1\n" << header.dump() << '\n';
    const std::string bytes = digest_bytes(model);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read classifier model " + path.string());
    std::string magic;
    std::getline(in, magic);
    if (magic != "MALARIA-CLASSIFIER 1") throw ParseError(path.string() + ": not a version-1 classifier file");
    std::string header_line;
    std::getline(in, header_line);
    ClassifierModel model;
    try {
        const auto header = nlohmann::json::parse(header_line);
        model.fingerprint = header.at("fingerprint");
        model.loss_history = header.at("loss_history").get<std::vector<double>>();
        for (const auto& shape : header.at("layer_shapes")) {
            const auto rows = shape.at(0).get<Eigen::Index>();
            const auto cols = shape.at(1).get<Eigen::Index>();
            model.layers.push_back({Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": malformed header: " + e.what());
    }
    for (auto& l : model.layers) {
        in.read(reinterpret_cast<char*>(l.weights.data()), static_cast<std::streamsize>(l.weights.size() * sizeof(double)));
        in.read(reinterpret_cast<char*>(l.bias.data()), static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
    }
    if (!in) throw ParseError(path.string() + ": truncated weights");
    return model;
}

} // namespace malaria
