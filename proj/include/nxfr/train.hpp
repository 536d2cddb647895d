#pragma once

// Mini-batch SGD with momentum, per-epoch evaluation and best-weight
// tracking.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nxfr/dataset.hpp"
#include "nxfr/model.hpp"
#include "nxfr/rng.hpp"

namespace nxfr {

struct TrainConfig {
    std::size_t epochs = 300;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t batch_size = 64;
    double dropout_flatten = 0.25;
    double dropout_dense = 0.5;
    double eval_fraction = 0.2;
    std::uint64_t seed = 0;
    /// Kernels are single-threaded with fixed reduction order, so runs are
    /// reproducible either way; the flag is carried for the config echo.
    bool deterministic = true;

    void validate() const {
        if (epochs < 1) {
            throw ConfigError("train: epochs must be at least 1");
        }
        if (!(learning_rate > 0.0)) {
            throw ConfigError("train: learning_rate must be positive");
        }
        if (!(momentum >= 0.0 && momentum < 1.0)) {
            throw ConfigError("train: momentum must be in [0,1)");
        }
        if (batch_size < 1) {
            throw ConfigError("train: batch_size must be at least 1");
        }
        for (double r : {dropout_flatten, dropout_dense}) {
            if (!(r >= 0.0 && r < 1.0)) {
                throw ConfigError("train: dropout rates must be in [0,1)");
            }
        }
        if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
            throw ConfigError("train: eval_fraction must be in (0,1)");
        }
    }
};

struct EpochRecord {
    std::size_t epoch = 0;  ///< 1-based
    double train_loss = 0.0;
    double train_accuracy = 0.0;  ///< running accuracy of train-mode predictions
    double eval_accuracy = 0.0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunReport {
    std::vector<EpochRecord> records;
    double best_eval_accuracy = 0.0;
    std::size_t best_epoch = 0;  ///< earliest epoch reaching best_eval_accuracy
    std::optional<double> accuracy_at_10;
    double wall_time_seconds = 0.0;
    std::vector<std::string> warnings;
};

/// Fills the derived fields of a report from its records.
inline void summarize(RunReport& r) {
    r.best_eval_accuracy = 0.0;
    r.best_epoch = 0;
    for (const auto& rec : r.records) {
        if (r.best_epoch == 0 || rec.eval_accuracy > r.best_eval_accuracy) {
            r.best_eval_accuracy = rec.eval_accuracy;
            r.best_epoch = rec.epoch;
        }
    }
    r.accuracy_at_10.reset();
    if (r.records.size() >= 10) {
        r.accuracy_at_10 = r.records[9].eval_accuracy;
    }
}

/// Equality of everything a run determines; wall time is excluded.
inline bool same_outcome(const RunReport& a, const RunReport& b) {
    return a.records == b.records && a.best_eval_accuracy == b.best_eval_accuracy && a.best_epoch == b.best_epoch &&
           a.accuracy_at_10 == b.accuracy_at_10 && a.warnings == b.warnings;
}

/// Mean of -log p[i, label_i], probabilities clamped to >= 1e-12.
template <typename T>
double cross_entropy(const Tensor<T>& probs, std::span<const std::uint8_t> labels) {
    require_rank(probs.shape(), 2, "cross_entropy probs");
    require_extent(labels.size(), probs.dim(0), "cross_entropy label count");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= probs.dim(1)) {
            throw ConfigError("cross_entropy: label " + std::to_string(labels[i]) + " outside 0..9");
        }
        total -= std::log(std::max(static_cast<double>(probs.at(i, labels[i])), 1e-12));
    }
    return total / static_cast<double>(labels.size());
}

/// Momentum buffers, one per parameter tensor; empty for layers without
/// parameters.
template <typename T>
struct Velocity {
    std::vector<Tensor<T>> weights;
    std::vector<Tensor<T>> bias;

    static Velocity zeros_like(const Model<T>& m) {
        Velocity v;
        for (const auto& l : m.layers()) {
            v.weights.push_back(l.has_parameters() ? Tensor<T>(l.weights.shape()) : Tensor<T>());
            v.bias.push_back(l.has_parameters() ? Tensor<T>(l.bias.shape()) : Tensor<T>());
        }
        return v;
    }
};

/// v <- momentum * v - lr * g; theta <- theta + v, only for layers that are
/// trainable and carry a gradient flagged for application.
template <typename T>
void sgd_step(Model<T>& model, const Gradients<T>& grads, Velocity<T>& velocity, double lr, double momentum) {
    if (grads.layers.size() != model.size() || velocity.weights.size() != model.size()) {
        throw ShapeError("sgd_step: gradient/velocity layer count does not match the model");
    }
    const T mu = static_cast<T>(momentum);
    const T rate = static_cast<T>(lr);
    auto update = [&](Tensor<T>& param, Tensor<T>& vel, const Tensor<T>& g, std::size_t layer) {
        if (!(g.shape() == param.shape()) || !(vel.shape() == param.shape())) {
            throw ShapeError("sgd_step: shape mismatch at layer " + std::to_string(layer) + ": param " +
                             param.shape().str() + ", grad " + g.shape().str());
        }
        for (std::size_t k = 0; k < param.size(); ++k) {
            vel[k] = mu * vel[k] - rate * g[k];
            param[k] += vel[k];
        }
    };
    for (std::size_t i = 0; i < model.size(); ++i) {
        Layer<T>& l = model.layer(i);
        const LayerGradient<T>& g = grads.layers[i];
        if (!l.trainable || !g.apply || !l.has_parameters()) {
            continue;
        }
        update(l.weights, velocity.weights[i], g.weights, i);
        update(l.bias, velocity.bias[i], g.bias, i);
    }
}

namespace detail {

/// Rows `idx` of a batch-major tensor of any rank.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& src, std::span<const std::size_t> idx) {
    const std::size_t stride = src.size() / src.dim(0);
    Tensor<T> out(src.shape().with_batch(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        std::copy_n(src.data() + idx[k] * stride, stride, out.data() + k * stride);
    }
    return out;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& probs, std::size_t row) {
    const T* p = probs.data() + row * probs.dim(1);
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.dim(1); ++c) {
        if (p[c] > p[best]) {
            best = c;
        }
    }
    return best;
}

} // namespace detail

/// Fraction of samples whose arg-max class (lowest index on ties) equals the
/// label. `inputs` feed layer `first_layer` onward.
template <typename T>
double evaluate(const Model<T>& model, const Tensor<T>& inputs, std::span<const std::uint8_t> labels,
                std::size_t first_layer = 0, std::size_t chunk = 256) {
    if (labels.empty()) {
        throw DatasetError("evaluate: empty partition");
    }
    require_extent(inputs.dim(0), labels.size(), "evaluate sample count");
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < labels.size(); start += chunk) {
        const std::size_t end = std::min(labels.size(), start + chunk);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor<T> probs = predict(model, detail::take_rows<T>(inputs, idx), first_layer);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            correct += detail::argmax_row(probs, r) == labels[start + r];
        }
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

template <typename T>
double evaluate(const Model<T>& model, const LabeledDataset& d, Partition p) {
    const auto idx = d.indices(p);
    if (idx.empty()) {
        throw DatasetError("evaluate: empty partition");
    }
    return evaluate(model, gather_images<T>(d, idx), gather_labels(d, idx));
}

/// Inputs for the training loop, already gathered per partition. The
/// inputs feed layer `first_layer`; transfer runs use this to train on
/// cached outputs of a frozen prefix.
template <typename T>
struct TrainingData {
    Tensor<T> train_inputs;
    std::vector<std::uint8_t> train_labels;
    Tensor<T> eval_inputs;
    std::vector<std::uint8_t> eval_labels;
    std::size_t first_layer = 0;
};

template <typename T>
TrainingData<T> training_data(const LabeledDataset& d) {
    const auto tr = d.indices(Partition::Train);
    const auto ev = d.indices(Partition::Eval);
    if (tr.empty()) {
        throw DatasetError("fit: dataset '" + d.name + "' has an empty train partition");
    }
    if (ev.empty()) {
        throw DatasetError("fit: dataset '" + d.name + "' has an empty eval partition");
    }
    return {gather_images<T>(d, tr), gather_labels(d, tr), gather_images<T>(d, ev), gather_labels(d, ev), 0};
}

/// Called after every epoch; returning false ends the run early. Used by
/// harnesses that poll extra metrics, not by the standard protocol.
template <typename T>
using EpochObserver = std::function<bool(const EpochRecord&, const Model<T>&)>;

template <typename T>
struct FitResult {
    Model<T> best_model;
    RunReport report;
};

/// Runs config.epochs epochs of shuffled mini-batch SGD and returns the
/// parameters of the epoch with the highest eval accuracy (earliest on
/// ties), not the final ones.
template <typename T>
FitResult<T> fit_prepared(Model<T> model, const TrainingData<T>& data, const TrainConfig& config,
                          const EpochObserver<T>& observer = {}) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    const std::size_t n = data.train_labels.size();
    if (n == 0) {
        throw DatasetError("fit: empty train partition");
    }
    if (data.eval_labels.empty()) {
        throw DatasetError("fit: empty eval partition");
    }
    model.set_dropout(config.dropout_flatten, config.dropout_dense);

    FitResult<T> result;
    RunReport& report = result.report;
    std::size_t batch = config.batch_size;
    if (batch > n) {
        report.warnings.push_back("batch_size " + std::to_string(batch) + " exceeds train partition of " +
                                  std::to_string(n) + "; clamped");
        batch = n;
    }

    Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
    Rng dropout_rng(derive_seed(config.seed, "dropout"));
    Velocity<T> velocity = Velocity<T>::zeros_like(model);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::uint8_t> batch_labels;
    bool have_best = false;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        for (std::size_t i = n - 1; i > 0; --i) {
            std::swap(order[i], order[shuffle_rng.below(i + 1)]);
        }
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
            const Tensor<T> inputs = detail::take_rows(data.train_inputs, idx);
            batch_labels.resize(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                batch_labels[k] = data.train_labels[idx[k]];
            }
            auto fwd = forward(model, inputs, Mode::Train, &dropout_rng, data.first_layer);
            const double batch_loss = cross_entropy(fwd.probs, batch_labels);
            if (!std::isfinite(batch_loss)) {
                throw DivergenceError("fit: loss became non-finite in epoch " + std::to_string(epoch) +
                                      "; lower learning_rate or momentum");
            }
            loss_sum += batch_loss * static_cast<double>(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                correct += detail::argmax_row(fwd.probs, k) == batch_labels[k];
            }
            const Gradients<T> grads = backward(model, fwd.trace, batch_labels);
            sgd_step(model, grads, velocity, config.learning_rate, config.momentum);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(n);
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        rec.eval_accuracy = evaluate(model, data.eval_inputs, data.eval_labels, data.first_layer);
        report.records.push_back(rec);
        if (!have_best || rec.eval_accuracy > report.best_eval_accuracy) {
            have_best = true;
            report.best_eval_accuracy = rec.eval_accuracy;
            report.best_epoch = epoch;
            result.best_model = model;
        }
        if (observer && !observer(rec, model)) {
            break;
        }
    }
    summarize(report);
    report.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

/// Trains on the Train partition of an already split dataset and evaluates
/// on its Eval partition after every epoch.
template <typename T>
FitResult<T> fit(const Model<T>& model, const LabeledDataset& dataset, const TrainConfig& config,
                 const EpochObserver<T>& observer = {}) {
    config.validate();
    dataset.validate();
    return fit_prepared(model, training_data<T>(dataset), config, observer);
}

} // namespace nxfr
