#pragma once

// Serialization of run reports: per-epoch CSV, JSON summaries with a full
// config echo, and the consolidated comparison tables. Field names are
// documented in docs/FORMATS.md.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "nxfr/train.hpp"
#include "nxfr/transfer.hpp"

namespace nxfr {

/// Shortest decimal text that parses back to the same double.
inline std::string format_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * fraction);
    return buf;
}

inline nlohmann::json config_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"batch_size", c.batch_size},
            {"dropout_flatten", c.dropout_flatten},
            {"dropout_dense", c.dropout_dense},
            {"eval_fraction", c.eval_fraction},
            {"seed", c.seed},
            {"deterministic", c.deterministic}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.dropout_flatten = j.value("dropout_flatten", c.dropout_flatten);
    c.dropout_dense = j.value("dropout_dense", c.dropout_dense);
    c.eval_fraction = j.value("eval_fraction", c.eval_fraction);
    c.seed = j.value("seed", c.seed);
    c.deterministic = j.value("deterministic", c.deterministic);
    return c;
}

inline nlohmann::json run_report_json(const RunReport& r) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& e : r.records) {
        records.push_back(
            {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_acc", e.train_accuracy}, {"eval_acc", e.eval_accuracy}});
    }
    return {{"best_eval_accuracy", r.best_eval_accuracy},
            {"best_epoch", r.best_epoch},
            {"accuracy_at_10", r.accuracy_at_10 ? nlohmann::json(*r.accuracy_at_10) : nlohmann::json(nullptr)},
            {"wall_time_seconds", r.wall_time_seconds},
            {"records", std::move(records)},
            {"warnings", r.warnings}};
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
    RunReport r;
    for (const auto& e : j.at("records")) {
        r.records.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                             e.at("train_acc").get<double>(), e.at("eval_acc").get<double>()});
    }
    r.best_eval_accuracy = j.at("best_eval_accuracy").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    if (!j.at("accuracy_at_10").is_null()) {
        r.accuracy_at_10 = j.at("accuracy_at_10").get<double>();
    }
    r.wall_time_seconds = j.value("wall_time_seconds", 0.0);
    r.warnings = j.value("warnings", std::vector<std::string>{});
    return r;
}

/// One row per epoch: epoch,train_loss,train_acc,eval_acc
inline std::string records_csv(const RunReport& r) {
    std::string out = "epoch,train_loss,train_acc,eval_acc\n";
    for (const auto& e : r.records) {
        out += std::to_string(e.epoch) + ',' + format_number(e.train_loss) + ',' + format_number(e.train_accuracy) +
               ',' + format_number(e.eval_accuracy) + '\n';
    }
    return out;
}

inline nlohmann::json standalone_report_json(const std::string& script, const RunReport& run,
                                             const nlohmann::json& config) {
    nlohmann::json j = run_report_json(run);
    j["kind"] = "standalone";
    j["script"] = script;
    j["config"] = config;
    return j;
}

inline nlohmann::json transfer_report_json(const TransferReport& t, const nlohmann::json& config) {
    nlohmann::json j = run_report_json(t.run);
    j["kind"] = "transfer";
    j["source_script"] = t.source_script;
    j["target_script"] = t.target_script;
    j["classifier_init"] = to_string(t.classifier_init);
    j["frozen_drift_free"] = t.frozen_drift_free;
    j["source_provenance"] = detail::provenance_json(t.source);
    j["config"] = config;
    return j;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("report: cannot write " + path.string());
    }
    out << text;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("report: cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error("report: malformed JSON in " + path.string() + ": " + e.what());
    }
}

/// One line of the transfer comparison table.
struct MatrixRow {
    std::string source;
    std::string destination;
    double best_accuracy = 0.0;
    std::size_t best_epoch = 0;
    std::optional<double> accuracy_after_10;

    friend bool operator==(const MatrixRow&, const MatrixRow&) = default;
};

inline MatrixRow matrix_row(const TransferReport& t) {
    return {t.source_script, t.target_script, t.run.best_eval_accuracy, t.run.best_epoch, t.run.accuracy_at_10};
}

inline std::string matrix_csv(const std::vector<MatrixRow>& rows) {
    std::string out = "source,destination,best_accuracy,best_epoch,accuracy_after_10\n";
    for (const auto& r : rows) {
        out += r.source + ',' + r.destination + ',' + format_number(r.best_accuracy) + ',' +
               std::to_string(r.best_epoch) + ',' + (r.accuracy_after_10 ? format_number(*r.accuracy_after_10) : "") +
               '\n';
    }
    return out;
}

inline std::vector<MatrixRow> parse_matrix_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line != "source,destination,best_accuracy,best_epoch,accuracy_after_10") {
        throw Error("report: unexpected matrix CSV header");
    }
    std::vector<MatrixRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> f;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) {
            f.push_back(cell);
        }
        if (f.size() == 4) {
            f.emplace_back();
        }
        if (f.size() != 5) {
            throw Error("report: malformed matrix CSV row: " + line);
        }
        MatrixRow r{f[0], f[1], std::stod(f[2]), static_cast<std::size_t>(std::stoul(f[3])), std::nullopt};
        if (!f[4].empty()) {
            r.accuracy_after_10 = std::stod(f[4]);
        }
        rows.push_back(r);
    }
    return rows;
}

/// Left-aligned text table with two spaces between columns.
inline std::string aligned_table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        width.resize(std::max(width.size(), r.size()));
        for (std::size_t c = 0; c < r.size(); ++c) {
            width[c] = std::max(width[c], r[c].size());
        }
    }
    std::string out;
    for (const auto& r : rows) {
        std::string line;
        for (std::size_t c = 0; c < r.size(); ++c) {
            line += r[c];
            if (c + 1 < r.size()) {
                line += std::string(width[c] - r[c].size() + 2, ' ');
            }
        }
        out += line + '\n';
    }
    return out;
}

inline std::string matrix_table(const std::vector<MatrixRow>& rows) {
    std::vector<std::vector<std::string>> t{
        {"Source Task", "Destination Task", "Best Accuracy", "Best Epoch", "Accuracy After 10 Epochs"}};
    for (const auto& r : rows) {
        t.push_back({r.source, r.destination, format_percent(r.best_accuracy), std::to_string(r.best_epoch),
                     r.accuracy_after_10 ? format_percent(*r.accuracy_after_10) : "n/a"});
    }
    return aligned_table(t);
}

/// Label a saved report is listed under: the script for standalone runs,
/// "source->destination" for transfer runs.
inline std::string run_label(const nlohmann::json& report) {
    const std::string kind = report.value("kind", "");
    if (kind == "standalone") {
        return report.at("script").get<std::string>();
    }
    if (kind == "transfer") {
        return report.at("source_script").get<std::string>() + "->" + report.at("target_script").get<std::string>();
    }
    throw Error("report: unknown report kind '" + kind + "'");
}

/// Standalone runs as one table, then transfer runs as another.
inline std::string render_reports(const std::vector<nlohmann::json>& reports) {
    std::vector<std::vector<std::string>> standalone{{"Script", "Best Accuracy", "Best Epoch", "Epochs Run"}};
    std::vector<MatrixRow> transfers;
    try {
        for (const auto& j : reports) {
            const RunReport run = run_report_from_json(j);
            const std::string kind = j.value("kind", "");
            if (kind == "standalone") {
                standalone.push_back({run_label(j), format_percent(run.best_eval_accuracy),
                                      std::to_string(run.best_epoch), std::to_string(run.records.size())});
            } else if (kind == "transfer") {
                transfers.push_back({j.at("source_script").get<std::string>(), j.at("target_script").get<std::string>(),
                                     run.best_eval_accuracy, run.best_epoch, run.accuracy_at_10});
            } else {
                throw Error("report: unknown report kind '" + kind + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("report: malformed report: ") + e.what());
    }
    std::string out;
    if (standalone.size() > 1) {
        out += "Standalone runs\n" + aligned_table(standalone);
    }
    if (!transfers.empty()) {
        out += (out.empty() ? "" : "\n") + std::string("Transfer runs\n") + matrix_table(transfers);
    }
    return out;
}

/// Long-format epoch series for plotting: run,epoch,train_loss,train_acc,eval_acc
inline std::string series_csv(const std::vector<nlohmann::json>& reports) {
    std::string out = "run,epoch,train_loss,train_acc,eval_acc\n";
    try {
        for (const auto& j : reports) {
            const std::string label = run_label(j);
            for (const auto& e : run_report_from_json(j).records) {
                out += label + ',' + std::to_string(e.epoch) + ',' + format_number(e.train_loss) + ',' +
                       format_number(e.train_accuracy) + ',' + format_number(e.eval_accuracy) + '\n';
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("report: malformed report: ") + e.what());
    }
    return out;
}

} // namespace nxfr
