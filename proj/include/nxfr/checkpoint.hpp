#pragma once

// NXFR checkpoint files.
//
//   bytes 0..3   "NXFR"
//   u32 LE       format version (1)
//   u32 LE       header length L
//   L bytes      UTF-8 JSON header: architecture, fingerprint, provenance
//   blobs        float32 LE parameters, layer order, weights before bias
//
// Files are written to a temp sibling and renamed into place, so readers
// never observe a partial file.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "nxfr/dataset.hpp"
#include "nxfr/errors.hpp"
#include "nxfr/model.hpp"

namespace nxfr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Where a set of weights came from.
struct Provenance {
    std::string script;
    std::size_t epoch_saved = 0;
    double eval_accuracy = 0.0;
    std::uint64_t seed = 0;
    nlohmann::json config = nlohmann::json::object();

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Checkpoint {
    Model<float> model;
    Provenance provenance;
    std::string fingerprint;
};

namespace detail {

inline nlohmann::json shape_json(const Shape& s) { return s.extents(); }

template <typename T>
nlohmann::json architecture_json(const Model<T>& m) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : m.layers()) {
        nlohmann::json j{{"kind", to_string(l.spec.kind)},
                         {"out_units", l.spec.out_units},
                         {"activation", to_string(l.spec.activation)},
                         {"dropout_after", l.spec.dropout_after},
                         {"trainable", l.trainable},
                         {"cluster", to_string(l.cluster)}};
        if (l.has_parameters()) {
            j["weights"] = shape_json(l.weights.shape());
            j["bias"] = shape_json(l.bias.shape());
        }
        layers.push_back(std::move(j));
    }
    return {{"input", shape_json(m.input_shape())}, {"layers", std::move(layers)}};
}

inline nlohmann::json provenance_json(const Provenance& p) {
    return {{"script", p.script},
            {"epoch_saved", p.epoch_saved},
            {"eval_accuracy", p.eval_accuracy},
            {"seed", p.seed},
            {"config", p.config}};
}

} // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& model, const Provenance& provenance, const std::filesystem::path& path) {
    std::size_t blob_floats = 0;
    for (const auto& l : model.layers()) {
        if (l.has_parameters() && (l.weights.empty() || l.bias.empty())) {
            throw CheckpointError("checkpoint: layer without allocated parameters");
        }
        blob_floats += l.parameter_count();
    }
    const nlohmann::json header{{"format", "nxfr-checkpoint"},
                                {"fingerprint", model.fingerprint()},
                                {"architecture", detail::architecture_json(model)},
                                {"provenance", detail::provenance_json(provenance)},
                                {"blob_bytes", blob_floats * 4}};
    const std::string text = header.dump();
    std::string out = "NXFR";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out.reserve(out.size() + blob_floats * 4);
    for (const auto& l : model.layers()) {
        if (!l.has_parameters()) {
            continue;
        }
        for (T v : l.weights.values()) {
            detail::put_f32(out, static_cast<float>(v));
        }
        for (T v : l.bias.values()) {
            detail::put_f32(out, static_cast<float>(v));
        }
    }
    detail::write_file_atomic(path, out, "checkpoint");
}

/// Reads and verifies a checkpoint: magic, version, header integrity,
/// fingerprint, and exact blob length. When `expected_fingerprint` is set
/// the stored architecture must match it.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<std::string>& expected_fingerprint = std::nullopt) {
    const std::string bytes = detail::read_file(path, "checkpoint");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 4 || bytes.compare(0, 4, "NXFR") != 0) {
        throw BadMagicError("checkpoint: " + path.string() + " is not an NXFR file (bad magic)");
    }
    if (bytes.size() < 12) {
        throw CorruptCheckpointError("checkpoint: truncated preamble in " + path.string());
    }
    const std::uint32_t version = detail::get_u32(p + 4);
    if (version != kCheckpointVersion) {
        throw UnsupportedVersionError("checkpoint: unsupported format version " + std::to_string(version));
    }
    const std::size_t header_len = detail::get_u32(p + 8);
    if (bytes.size() < 12 + header_len) {
        throw CorruptCheckpointError("checkpoint: header length " + std::to_string(header_len) +
                                     " exceeds file size");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpointError(std::string("checkpoint: unreadable header: ") + e.what());
    }

    Checkpoint ck;
    try {
        std::vector<LayerSpec> specs;
        std::vector<bool> trainable;
        for (const auto& j : header.at("architecture").at("layers")) {
            specs.push_back({parse_layer_kind(j.at("kind").get<std::string>()), j.at("out_units").get<std::size_t>(),
                             parse_activation(j.at("activation").get<std::string>()),
                             j.at("dropout_after").get<double>()});
            trainable.push_back(j.at("trainable").get<bool>());
        }
        const Shape input(header.at("architecture").at("input").get<std::vector<std::size_t>>());
        ck.model = Model<float>::from_specs(specs, input);
        const auto& layers = header.at("architecture").at("layers");
        for (std::size_t i = 0; i < specs.size(); ++i) {
            auto& l = ck.model.layer(i);
            l.trainable = trainable[i];
            if (l.has_parameters() &&
                (Shape(layers[i].at("weights").get<std::vector<std::size_t>>()) != l.weights.shape() ||
                 Shape(layers[i].at("bias").get<std::vector<std::size_t>>()) != l.bias.shape())) {
                throw CorruptCheckpointError("checkpoint: declared shapes of layer " + std::to_string(i) +
                                             " disagree with its spec");
            }
        }
        const auto& prov = header.at("provenance");
        ck.provenance.script = prov.at("script").get<std::string>();
        ck.provenance.epoch_saved = prov.at("epoch_saved").get<std::size_t>();
        ck.provenance.eval_accuracy = prov.at("eval_accuracy").get<double>();
        ck.provenance.seed = prov.at("seed").get<std::uint64_t>();
        ck.provenance.config = prov.at("config");
        ck.fingerprint = header.at("fingerprint").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpointError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const CheckpointError&) {
        throw;
    } catch (const Error& e) {
        throw CorruptCheckpointError(std::string("checkpoint: invalid architecture: ") + e.what());
    }

    if (ck.fingerprint != ck.model.fingerprint()) {
        throw CorruptCheckpointError("checkpoint: stored fingerprint " + ck.fingerprint +
                                     " does not hash the stored architecture (" + ck.model.fingerprint() + ")");
    }
    const std::size_t blob_bytes = ck.model.parameter_count() * 4;
    const std::size_t present = bytes.size() - 12 - header_len;
    if (present != blob_bytes) {
        throw CorruptCheckpointError("checkpoint: parameter blobs hold " + std::to_string(present) +
                                     " bytes, architecture needs " + std::to_string(blob_bytes));
    }
    if (expected_fingerprint && *expected_fingerprint != ck.fingerprint) {
        throw FingerprintMismatchError("checkpoint: architecture fingerprint " + ck.fingerprint + " does not match " +
                                       "expected " + *expected_fingerprint);
    }
    const unsigned char* blob = p + 12 + header_len;
    for (auto& l : ck.model.layers()) {
        if (!l.has_parameters()) {
            continue;
        }
        for (auto& v : l.weights.values()) {
            v = detail::get_f32(blob);
            blob += 4;
        }
        for (auto& v : l.bias.values()) {
            v = detail::get_f32(blob);
            blob += 4;
        }
    }
    return ck;
}

} // namespace nxfr
