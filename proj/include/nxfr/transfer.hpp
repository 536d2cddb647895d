#pragma once

// Second phase of the protocol: load source-task weights, freeze the
// feature-extractor cluster, prepare the classifier cluster and retrain it
// on the target script.

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>

#include "nxfr/checkpoint.hpp"
#include "nxfr/dataset.hpp"
#include "nxfr/model.hpp"
#include "nxfr/train.hpp"

namespace nxfr {

enum class ClassifierInit { Reinitialize, Retain };

inline const char* to_string(ClassifierInit c) { return c == ClassifierInit::Reinitialize ? "reinitialize" : "retain"; }

inline ClassifierInit parse_classifier_init(const std::string& s) {
    if (s == "reinitialize" || s == "reinit") {
        return ClassifierInit::Reinitialize;
    }
    if (s == "retain") {
        return ClassifierInit::Retain;
    }
    throw ConfigError("transfer: classifier mode must be 'reinitialize' or 'retain', got '" + s + "'");
}

/// Fingerprint of the reference (64/64/64/32, 512/256/128) network.
inline std::string reference_fingerprint() {
    return Model<float>::from_specs(Architecture::reference().specs()).fingerprint();
}

struct TransferConfig {
    std::filesystem::path source_checkpoint;
    std::size_t epochs = 100;
    ClassifierInit classifier_init = ClassifierInit::Reinitialize;
    TrainConfig train;  ///< optimizer/dropout/seed settings; train.epochs is ignored
    /// Architecture the source checkpoint must have; nullopt accepts any.
    std::optional<std::string> expected_fingerprint = reference_fingerprint();
    /// Precompute the frozen prefix once instead of every epoch. Results are
    /// identical either way.
    bool cache_frozen_features = true;
};

struct TransferReport {
    std::string source_script;
    std::string target_script;
    ClassifierInit classifier_init = ClassifierInit::Reinitialize;
    RunReport run;
    bool frozen_drift_free = false;
    Provenance source;
};

struct TransferResult {
    Model<float> best_model;
    TransferReport report;
};

/// Marks every feature-extractor layer non-trainable. Idempotent.
template <typename T>
void freeze_feature_extractor(Model<T>& model) {
    const std::size_t split = model.classifier_begin();
    bool has_features = false;
    for (std::size_t i = 0; i < split && i < model.size(); ++i) {
        has_features = has_features || model.layer(i).has_parameters();
    }
    if (split == model.size() || !has_features) {
        throw ConfigError("transfer: model lacks a parameterized feature-extractor cluster");
    }
    for (std::size_t i = 0; i < split; ++i) {
        model.layer(i).trainable = false;
    }
}

/// Reinitialize redraws the classifier cluster from a generator seeded with
/// `seed`; Retain leaves it alone. Feature-extractor parameters are never
/// touched.
template <typename T>
void prepare_classifier(Model<T>& model, ClassifierInit mode, std::uint64_t seed) {
    for (std::size_t i = 0; i < model.classifier_begin(); ++i) {
        if (model.layer(i).has_parameters() && model.layer(i).trainable) {
            throw InvariantError("transfer: prepare_classifier needs a frozen feature extractor");
        }
    }
    if (mode == ClassifierInit::Retain) {
        return;
    }
    Rng rng(seed);
    for (std::size_t i = model.classifier_begin(); i < model.size(); ++i) {
        initialize_layer(model.layer(i), rng);
    }
}

/// True when every feature-extractor parameter of `model` is bitwise equal
/// to the one in `reference`.
template <typename T>
bool feature_extractor_unchanged(const Model<T>& reference, const Model<T>& model) {
    if (reference.size() != model.size() || reference.classifier_begin() != model.classifier_begin()) {
        return false;
    }
    for (std::size_t i = 0; i < reference.classifier_begin(); ++i) {
        if (!bitwise_equal(reference.layer(i).weights, model.layer(i).weights) ||
            !bitwise_equal(reference.layer(i).bias, model.layer(i).bias)) {
            return false;
        }
    }
    return true;
}

namespace detail {

/// Number of leading layers whose output is a fixed function of the input:
/// no trainable parameters and no dropout.
template <typename T>
std::size_t frozen_prefix_length(const Model<T>& m) {
    std::size_t k = 0;
    while (k < m.classifier_begin()) {
        const auto& l = m.layer(k);
        if ((l.has_parameters() && l.trainable) || l.spec.dropout_after > 0.0) {
            break;
        }
        ++k;
    }
    return k;
}

template <typename T>
Tensor<T> prefix_features(const Model<T>& m, const Tensor<float>& images, std::size_t end_layer) {
    const std::size_t n = images.dim(0);
    const Shape& per_sample = m.layer(end_layer).input_shape;
    std::vector<std::size_t> extents{n};
    for (auto e : per_sample.extents()) {
        extents.push_back(e);
    }
    Tensor<T> out{Shape(extents)};
    const std::size_t stride = per_sample.elements();
    const std::size_t chunk = 256;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor<T> f = forward_prefix(m, take_rows(images, idx).template cast<T>(), end_layer);
        std::copy_n(f.data(), f.size(), out.data() + start * stride);
    }
    return out;
}

} // namespace detail

/// Freeze, prepare the classifier, retrain for config.epochs on the target
/// dataset (already split), checking after every epoch that no frozen
/// parameter moved.
/// Throws InvariantError on frozen-parameter drift.
inline TransferResult transfer_fit(const Checkpoint& source, const LabeledDataset& target, const TransferConfig& config) {
    if (config.epochs < 1) {
        throw ConfigError("transfer: epochs must be at least 1");
    }
    TrainConfig train = config.train;
    train.epochs = config.epochs;
    train.validate();
    target.validate();

    Model<float> model = source.model;
    freeze_feature_extractor(model);
    prepare_classifier(model, config.classifier_init, derive_seed(train.seed, "classifier"));
    model.set_dropout(train.dropout_flatten, train.dropout_dense);

    TrainingData<float> data;
    if (config.cache_frozen_features) {
        const std::size_t k = detail::frozen_prefix_length(model);
        const auto tr = target.indices(Partition::Train);
        const auto ev = target.indices(Partition::Eval);
        if (tr.empty() || ev.empty()) {
            throw DatasetError("transfer: target dataset '" + target.name + "' needs train and eval partitions");
        }
        data.train_inputs = detail::prefix_features<float>(model, gather_images<float>(target, tr), k);
        data.train_labels = gather_labels(target, tr);
        data.eval_inputs = detail::prefix_features<float>(model, gather_images<float>(target, ev), k);
        data.eval_labels = gather_labels(target, ev);
        data.first_layer = k;
    } else {
        data = training_data<float>(target);
    }

    bool drift_free = true;
    const EpochObserver<float> watch = [&](const EpochRecord&, const Model<float>& current) {
        drift_free = drift_free && feature_extractor_unchanged(source.model, current);
        return true;
    };
    FitResult<float> fitted = fit_prepared(std::move(model), data, train, watch);

    TransferResult result;
    result.report.source_script = source.provenance.script;
    result.report.target_script = target.name;
    result.report.classifier_init = config.classifier_init;
    result.report.run = std::move(fitted.report);
    result.report.source = source.provenance;
    result.report.frozen_drift_free = drift_free && feature_extractor_unchanged(source.model, fitted.best_model);
    if (!result.report.frozen_drift_free) {
        throw InvariantError("transfer: frozen feature-extractor parameters changed during retraining");
    }
    result.best_model = std::move(fitted.best_model);
    return result;
}

inline TransferResult transfer_fit(const TransferConfig& config, const LabeledDataset& target) {
    const Checkpoint source = load_checkpoint(config.source_checkpoint, config.expected_fingerprint);
    return transfer_fit(source, target, config);
}

} // namespace nxfr
