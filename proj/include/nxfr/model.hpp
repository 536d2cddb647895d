#pragma once

// The layered network: layer descriptors, parameter storage with trainable
// flags, forward pass in train/eval mode and backpropagation of the mean
// cross-entropy loss through the stack.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nxfr/errors.hpp"
#include "nxfr/kernels.hpp"
#include "nxfr/rng.hpp"
#include "nxfr/tensor.hpp"

namespace nxfr {

enum class LayerKind { Conv3x3, MaxPool2x2, Flatten, Dense, Output };
enum class Activation { ELU, Softmax, None };
enum class Cluster { FeatureExtractor, Classifier };
enum class Mode { Train, Eval };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv3x3: return "Conv3x3";
        case LayerKind::MaxPool2x2: return "MaxPool2x2";
        case LayerKind::Flatten: return "Flatten";
        case LayerKind::Dense: return "Dense";
        case LayerKind::Output: return "Output";
    }
    return "?";
}

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::ELU: return "ELU";
        case Activation::Softmax: return "Softmax";
        case Activation::None: return "None";
    }
    return "?";
}

inline const char* to_string(Cluster c) {
    return c == Cluster::FeatureExtractor ? "FeatureExtractor" : "Classifier";
}

inline LayerKind parse_layer_kind(const std::string& s) {
    for (auto k : {LayerKind::Conv3x3, LayerKind::MaxPool2x2, LayerKind::Flatten, LayerKind::Dense, LayerKind::Output}) {
        if (s == to_string(k)) {
            return k;
        }
    }
    throw ConfigError("model: unknown layer kind '" + s + "'");
}

inline Activation parse_activation(const std::string& s) {
    for (auto a : {Activation::ELU, Activation::Softmax, Activation::None}) {
        if (s == to_string(a)) {
            return a;
        }
    }
    throw ConfigError("model: unknown activation '" + s + "'");
}

inline constexpr std::size_t kNumClasses = 10;
inline constexpr std::size_t kImageSize = 32;
inline const Shape kInputShape{1, kImageSize, kImageSize};

/// One row of the architecture table.
struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    std::size_t out_units = 0;  ///< filters for Conv3x3, units for Dense/Output, 0 otherwise
    Activation activation = Activation::None;
    double dropout_after = 0.0;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline Cluster cluster_of(LayerKind k) {
    return (k == LayerKind::Dense || k == LayerKind::Output) ? Cluster::Classifier : Cluster::FeatureExtractor;
}

inline bool has_parameters(LayerKind k) {
    return k == LayerKind::Conv3x3 || k == LayerKind::Dense || k == LayerKind::Output;
}

/// Layer widths of the conv/pool/flatten/dense/output stack. The defaults
/// are the reference network: four 3x3 convolutions (64, 64, 64, 32), one
/// 2x2 max pool, dense 512/256/128 and a 10-way softmax, ELU everywhere
/// else. Narrower widths build reduced models with the same topology.
struct Architecture {
    std::vector<std::size_t> conv_filters{64, 64, 64, 32};
    bool pool = true;
    std::vector<std::size_t> dense_units{512, 256, 128};
    double dropout_flatten = 0.25;
    double dropout_dense = 0.5;

    static Architecture reference() { return {}; }

    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> out;
        for (auto f : conv_filters) {
            out.push_back({LayerKind::Conv3x3, f, Activation::ELU, 0.0});
        }
        if (pool) {
            out.push_back({LayerKind::MaxPool2x2, 0, Activation::None, 0.0});
        }
        out.push_back({LayerKind::Flatten, 0, Activation::None, dropout_flatten});
        for (auto u : dense_units) {
            out.push_back({LayerKind::Dense, u, Activation::ELU, dropout_dense});
        }
        out.push_back({LayerKind::Output, kNumClasses, Activation::Softmax, 0.0});
        return out;
    }
};

template <typename T>
struct Layer {
    LayerSpec spec;
    Cluster cluster = Cluster::Classifier;
    Shape input_shape;   ///< per sample, without batch axis
    Shape output_shape;  ///< per sample
    Tensor<T> weights;   ///< [F,C,3,3] or [out,in]; empty for parameter-free layers
    Tensor<T> bias;
    bool trainable = true;

    bool has_parameters() const { return nxfr::has_parameters(spec.kind); }
    std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

template <typename T>
class Model {
public:
    Model() = default;

    /// Lays out parameter shapes for `specs` on the given per-sample input
    /// shape. Parameters start at zero; see build_model for initialization.
    static Model from_specs(const std::vector<LayerSpec>& specs, const Shape& input = kInputShape) {
        if (specs.empty()) {
            throw ConfigError("model: empty layer list");
        }
        Model m;
        Shape current = input;
        bool seen_classifier = false;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const LayerSpec& s = specs[i];
            const std::string where = "model: layer " + std::to_string(i) + " (" + to_string(s.kind) + ")";
            if (!(s.dropout_after >= 0.0 && s.dropout_after < 1.0)) {
                throw ConfigError(where + ": dropout rate must be in [0,1)");
            }
            Layer<T> layer;
            layer.spec = s;
            layer.cluster = cluster_of(s.kind);
            layer.input_shape = current;
            if (layer.cluster == Cluster::Classifier) {
                seen_classifier = true;
            } else if (seen_classifier) {
                throw ConfigError(where + ": feature-extractor layer after the classifier cluster");
            }
            switch (s.kind) {
                case LayerKind::Conv3x3: {
                    if (current.rank() != 3 || s.out_units == 0) {
                        throw ShapeError(where + ": needs a CHW input and positive filter count");
                    }
                    if (s.activation == Activation::Softmax) {
                        throw ConfigError(where + ": softmax is reserved for the output layer");
                    }
                    layer.weights = Tensor<T>(Shape{s.out_units, current[0], 3, 3});
                    layer.bias = Tensor<T>(Shape{s.out_units});
                    current = Shape{s.out_units, current[1], current[2]};
                    break;
                }
                case LayerKind::MaxPool2x2: {
                    if (current.rank() != 3 || current[1] % 2 || current[2] % 2) {
                        throw ShapeError(where + ": needs a CHW input with even height and width");
                    }
                    current = Shape{current[0], current[1] / 2, current[2] / 2};
                    break;
                }
                case LayerKind::Flatten:
                    current = Shape{current.elements()};
                    break;
                case LayerKind::Dense:
                case LayerKind::Output: {
                    if (current.rank() != 1) {
                        throw ShapeError(where + ": dense layers need a flattened input");
                    }
                    if (s.kind == LayerKind::Output) {
                        if (i + 1 != specs.size() || s.activation != Activation::Softmax ||
                            s.out_units != kNumClasses) {
                            throw ConfigError(where + ": must be last, softmax, 10 units");
                        }
                    } else if (s.out_units == 0 || s.activation == Activation::Softmax) {
                        throw ConfigError(where + ": needs positive units and a non-softmax activation");
                    }
                    layer.weights = Tensor<T>(Shape{s.out_units, current[0]});
                    layer.bias = Tensor<T>(Shape{s.out_units});
                    current = Shape{s.out_units};
                    break;
                }
            }
            layer.output_shape = current;
            m.layers_.push_back(std::move(layer));
        }
        if (m.layers_.back().spec.kind != LayerKind::Output) {
            throw ConfigError("model: last layer must be Output");
        }
        return m;
    }

    std::size_t size() const noexcept { return layers_.size(); }
    Layer<T>& layer(std::size_t i) { return layers_.at(i); }
    const Layer<T>& layer(std::size_t i) const { return layers_.at(i); }
    std::span<Layer<T>> layers() noexcept { return layers_; }
    std::span<const Layer<T>> layers() const noexcept { return layers_; }

    const Shape& input_shape() const { return layers_.front().input_shape; }

    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> out;
        for (const auto& l : layers_) {
            out.push_back(l.spec);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) {
            n += l.parameter_count();
        }
        return n;
    }

    std::size_t trainable_parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) {
            n += l.trainable ? l.parameter_count() : 0;
        }
        return n;
    }

    /// Canonical text of ordered layer kinds and parameter shapes. Dropout
    /// rates and trainable flags are deliberately left out: they do not
    /// change which parameters a checkpoint carries.
    std::string fingerprint_text() const {
        std::string s = "in" + input_shape().str();
        for (const auto& l : layers_) {
            s += ';';
            s += to_string(l.spec.kind);
            s += '/' + std::to_string(l.spec.out_units) + '/' + to_string(l.spec.activation);
            if (l.has_parameters()) {
                s += "/w" + l.weights.shape().str() + "/b" + l.bias.shape().str();
            }
        }
        return s;
    }

    /// 16 hex digits of FNV-1a over fingerprint_text().
    std::string fingerprint() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(fingerprint_text())));
        return buf;
    }

    /// Index of the first layer tagged Classifier.
    std::size_t classifier_begin() const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (layers_[i].cluster == Cluster::Classifier) {
                return i;
            }
        }
        return layers_.size();
    }

    /// Sets dropout after Flatten and after every hidden Dense layer.
    void set_dropout(double after_flatten, double after_dense) {
        for (double r : {after_flatten, after_dense}) {
            if (!(r >= 0.0 && r < 1.0)) {
                throw ConfigError("model: dropout rate must be in [0,1)");
            }
        }
        for (auto& l : layers_) {
            if (l.spec.kind == LayerKind::Flatten) {
                l.spec.dropout_after = after_flatten;
            } else if (l.spec.kind == LayerKind::Dense) {
                l.spec.dropout_after = after_dense;
            }
        }
    }

    template <typename U>
    Model<U> cast() const {
        Model<U> m = Model<U>::from_specs(specs(), input_shape());
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            auto& dst = m.layer(i);
            dst.trainable = layers_[i].trainable;
            if (layers_[i].has_parameters()) {
                dst.weights = layers_[i].weights.template cast<U>();
                dst.bias = layers_[i].bias.template cast<U>();
            }
        }
        return m;
    }

private:
    std::vector<Layer<T>> layers_;
};

/// Bitwise equality of every parameter tensor (specs and flags ignored).
template <typename T>
bool parameters_bitwise_equal(const Model<T>& a, const Model<T>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!bitwise_equal(a.layer(i).weights, b.layer(i).weights) || !bitwise_equal(a.layer(i).bias, b.layer(i).bias)) {
            return false;
        }
    }
    return true;
}

/// Fan-in scaled uniform initialization. Hidden layers use the He bound
/// sqrt(6 / fan_in); the softmax layer uses 0.25 / sqrt(fan_in) so that
/// untrained predictions start near uniform even with dropout active.
/// Biases are zero.
template <typename T>
void initialize_layer(Layer<T>& layer, Rng& rng) {
    if (!layer.has_parameters()) {
        return;
    }
    const std::size_t fan_in = layer.weights.size() / layer.weights.dim(0);
    const double bound = layer.spec.kind == LayerKind::Output ? 0.25 / std::sqrt(static_cast<double>(fan_in))
                                                              : std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& w : layer.weights.values()) {
        w = static_cast<T>(rng.uniform(-bound, bound));
    }
    layer.bias.fill(T{0});
}

/// Builds the stack for `arch` with every layer trainable and parameters
/// drawn from a generator seeded with `seed`.
template <typename T = float>
Model<T> build_model(std::uint64_t seed, const Architecture& arch = Architecture::reference()) {
    Model<T> m = Model<T>::from_specs(arch.specs());
    Rng rng(seed);
    for (auto& l : m.layers()) {
        initialize_layer(l, rng);
    }
    return m;
}

template <typename T>
struct DropoutResult {
    Tensor<T> output;
    Tensor<T> mask;  ///< 0 or 1/(1-rate) per element
};

/// Inverted dropout: each element is zeroed with probability `rate` and
/// survivors are scaled by 1/(1-rate), so E[output] = x.
template <typename T>
DropoutResult<T> apply_dropout(const Tensor<T>& x, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    DropoutResult<T> r{x, Tensor<T>(x.shape(), T{1})};
    if (rate == 0.0) {
        return r;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T m = rng.uniform() < rate ? T{0} : keep_scale;
        r.mask[i] = m;
        r.output[i] = x[i] * m;
    }
    return r;
}

/// Cached intermediates of one forward pass, consumed by backward().
template <typename T>
struct ForwardTrace {
    Mode mode = Mode::Eval;
    std::size_t first_layer = 0;
    std::vector<Tensor<T>> inputs;        ///< per-layer input (after the previous layer's dropout)
    std::vector<Tensor<T>> activations;   ///< post-ELU, pre-dropout output of ELU layers
    std::vector<Tensor<T>> dropout_masks; ///< empty where no dropout was applied
    std::vector<PoolMask> pool_masks;
    Tensor<T> probs;
};

namespace detail {

template <typename T>
void check_batch_shape(const Model<T>& model, const Tensor<T>& batch, std::size_t first_layer) {
    if (first_layer >= model.size()) {
        throw ConfigError("forward: first layer index out of range");
    }
    const Shape& want = model.layer(first_layer).input_shape;
    const Shape& got = batch.shape();
    bool ok = got.rank() == want.rank() + 1;
    for (std::size_t i = 0; ok && i < want.rank(); ++i) {
        ok = got[i + 1] == want[i];
    }
    if (!ok) {
        throw ShapeError("forward: batch shape " + got.str() + " does not match layer " + std::to_string(first_layer) +
                         " input " + want.str() + " (plus batch axis)");
    }
}

template <typename T>
Tensor<T> run_forward(const Model<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng, std::size_t first_layer,
                      ForwardTrace<T>* trace) {
    check_batch_shape(model, batch, first_layer);
    const std::size_t n = batch.dim(0);
    if (trace) {
        trace->mode = mode;
        trace->first_layer = first_layer;
        trace->inputs.assign(model.size(), {});
        trace->activations.assign(model.size(), {});
        trace->dropout_masks.assign(model.size(), {});
        trace->pool_masks.assign(model.size(), {});
    }
    Tensor<T> x = batch;
    for (std::size_t i = first_layer; i < model.size(); ++i) {
        const Layer<T>& l = model.layer(i);
        if (trace) {
            trace->inputs[i] = x;
        }
        Tensor<T> y;
        switch (l.spec.kind) {
            case LayerKind::Conv3x3:
                y = conv2d_forward(x, l.weights, l.bias, ConvGeometry{l.weights.dim(1), l.weights.dim(0)});
                break;
            case LayerKind::MaxPool2x2: {
                auto pooled = maxpool2x2_forward(x);
                y = std::move(pooled.output);
                if (trace) {
                    trace->pool_masks[i] = std::move(pooled.mask);
                }
                break;
            }
            case LayerKind::Flatten:
                y = x.reshaped(Shape{n, l.output_shape[0]});
                break;
            case LayerKind::Dense:
            case LayerKind::Output:
                y = dense_forward(x, l.weights, l.bias);
                break;
        }
        if (l.spec.activation == Activation::ELU) {
            for (auto& v : y.values()) {
                v = v > T{0} ? v : std::expm1(v);
            }
            if (trace) {
                trace->activations[i] = y;
            }
        } else if (l.spec.activation == Activation::Softmax) {
            y = softmax(y);
        }
        if (mode == Mode::Train && l.spec.dropout_after > 0.0) {
            if (!rng) {
                throw ConfigError("forward: train mode with dropout needs a generator");
            }
            auto d = apply_dropout(y, l.spec.dropout_after, *rng);
            y = std::move(d.output);
            if (trace) {
                trace->dropout_masks[i] = std::move(d.mask);
            }
        }
        x = std::move(y);
    }
    if (trace) {
        trace->probs = x;
    }
    return x;
}

} // namespace detail

template <typename T>
struct ForwardResult {
    Tensor<T> probs;  ///< [N, 10]
    ForwardTrace<T> trace;
};

/// Runs layers [first_layer, end) on `batch`. Train mode applies dropout
/// (drawing from `rng`) and records what backward() needs; Eval mode is a
/// deterministic pure function of (model, batch).
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const Tensor<T>& batch, Mode mode, Rng* rng = nullptr,
                         std::size_t first_layer = 0) {
    ForwardResult<T> r;
    r.probs = detail::run_forward(model, batch, mode, rng, first_layer, &r.trace);
    return r;
}

/// Eval-mode forward without a trace.
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& batch, std::size_t first_layer = 0) {
    return detail::run_forward<T>(model, batch, Mode::Eval, nullptr, first_layer, nullptr);
}

/// Output of layers [0, end_layer) in eval mode.
template <typename T>
Tensor<T> forward_prefix(const Model<T>& model, const Tensor<T>& batch, std::size_t end_layer) {
    detail::check_batch_shape(model, batch, 0);
    Tensor<T> x = batch;
    for (std::size_t i = 0; i < end_layer; ++i) {
        const Layer<T>& l = model.layer(i);
        switch (l.spec.kind) {
            case LayerKind::Conv3x3:
                x = conv2d_forward(x, l.weights, l.bias, ConvGeometry{l.weights.dim(1), l.weights.dim(0)});
                break;
            case LayerKind::MaxPool2x2:
                x = maxpool2x2_forward(x).output;
                break;
            case LayerKind::Flatten:
                x.reshape(Shape{x.dim(0), l.output_shape[0]});
                break;
            case LayerKind::Dense:
                x = dense_forward(x, l.weights, l.bias);
                break;
            case LayerKind::Output:
                throw ConfigError("forward_prefix: prefix may not include the output layer");
        }
        if (l.spec.activation == Activation::ELU) {
            for (auto& v : x.values()) {
                v = v > T{0} ? v : std::expm1(v);
            }
        }
    }
    return x;
}

template <typename T>
struct LayerGradient {
    Tensor<T> weights;  ///< empty when not computed
    Tensor<T> bias;
    bool apply = false; ///< false for frozen or parameter-free layers
};

template <typename T>
struct Gradients {
    std::vector<LayerGradient<T>> layers;
};

/// Gradients of the mean cross-entropy of `trace.probs` against `labels`
/// with respect to every trainable parameter. The softmax/cross-entropy head
/// uses the fused gradient (probs - onehot) / N. Propagation stops at the
/// lowest trainable layer; frozen layers above it pass gradient through but
/// are flagged so the optimizer leaves them alone.
template <typename T>
Gradients<T> backward(const Model<T>& model, const ForwardTrace<T>& trace, std::span<const std::uint8_t> labels) {
    if (trace.mode != Mode::Train || trace.inputs.size() != model.size() || trace.probs.empty()) {
        throw InvariantError("backward: needs the trace of a train-mode forward on this model");
    }
    const std::size_t n = trace.probs.dim(0);
    if (labels.size() != n) {
        throw ShapeError("backward: " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(n));
    }
    Gradients<T> grads;
    grads.layers.resize(model.size());

    std::optional<std::size_t> lowest;
    for (std::size_t i = trace.first_layer; i < model.size(); ++i) {
        if (model.layer(i).has_parameters() && model.layer(i).trainable) {
            lowest = i;
            break;
        }
    }
    if (!lowest) {
        return grads;
    }

    Tensor<T> g = trace.probs;
    const T inv_n = T{1} / static_cast<T>(n);
    const std::size_t classes = g.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] >= classes) {
            throw ConfigError("backward: label " + std::to_string(labels[r]) + " outside 0..9");
        }
        g.at(r, labels[r]) -= T{1};
    }
    for (auto& v : g.values()) {
        v *= inv_n;
    }

    for (std::size_t i = model.size(); i-- > *lowest;) {
        const Layer<T>& l = model.layer(i);
        const bool need_input = i > *lowest;
        if (!trace.dropout_masks[i].empty()) {
            const auto& m = trace.dropout_masks[i];
            for (std::size_t k = 0; k < g.size(); ++k) {
                g[k] *= m[k];
            }
        }
        if (l.spec.activation == Activation::ELU) {
            detail::elu_backward_inplace<T>(g.values(), trace.activations[i].values(), T{1});
        }
        LayerGradient<T>& out = grads.layers[i];
        switch (l.spec.kind) {
            case LayerKind::Conv3x3: {
                auto cg = conv2d_backward(trace.inputs[i], l.weights, g, need_input);
                if (l.trainable) {
                    out.weights = std::move(cg.weights);
                    out.bias = std::move(cg.bias);
                    out.apply = true;
                }
                g = std::move(cg.input);
                break;
            }
            case LayerKind::MaxPool2x2:
                g = maxpool2x2_backward(g, trace.pool_masks[i]);
                break;
            case LayerKind::Flatten:
                g.reshape(trace.inputs[i].shape());
                break;
            case LayerKind::Dense:
            case LayerKind::Output: {
                auto dg = dense_backward(trace.inputs[i], l.weights, g, need_input);
                if (l.trainable) {
                    out.weights = std::move(dg.weights);
                    out.bias = std::move(dg.bias);
                    out.apply = true;
                }
                g = std::move(dg.input);
                break;
            }
        }
    }
    return grads;
}

} // namespace nxfr
