// nxfr: train a numeral classifier, transfer it to another script, and
// tabulate the results.
//
// Exit codes: 0 ok, 2 usage or configuration, 3 data/checkpoint/IO,
// 4 internal invariant, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "nxfr/image_io.hpp"
#include "nxfr/nxfr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kUsage = 2, kData = 3, kInvariant = 4 };

struct UsageError : nxfr::ConfigError {
    using nxfr::ConfigError::ConfigError;
};

// ---------------------------------------------------------------------------
// Settings: every run is described by a flat key=value map. Flags override a
// --config file, which overrides built-in defaults; the final map is echoed
// next to the reports so a run can be repeated with --config.

using Settings = std::map<std::string, std::string>;

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

Settings read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw nxfr::Error("config: cannot open " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    Settings out;
    if (trim(text).starts_with("{")) {
        // A JSON report or echo; its "config" member (or the object itself).
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw UsageError("config: malformed JSON in " + path.string() + ": " + e.what());
        }
        const json& obj = j.contains("config") ? j.at("config") : j;
        for (const auto& [k, v] : obj.items()) {
            out[k] = v.is_string() ? v.get<std::string>() : v.dump();
        }
        return out;
    }
    std::istringstream lines(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
        ++n;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config: " + path.string() + ":" + std::to_string(n) + ": expected key=value");
        }
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

std::string settings_text(const Settings& s) {
    std::string out;
    for (const auto& [k, v] : s) {
        out += k + '=' + v + '\n';
    }
    return out;
}

json settings_json(const Settings& s) {
    json j = json::object();
    for (const auto& [k, v] : s) {
        j[k] = v;
    }
    return j;
}

template <typename T>
T parse_value(const Settings& s, const std::string& key) {
    const std::string& text = s.at(key);
    T value{};
    std::istringstream in(text);
    if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes") {
            return true;
        }
        if (text == "false" || text == "0" || text == "no") {
            return false;
        }
        throw UsageError("config: " + key + " must be true or false, got '" + text + "'");
    } else {
        in >> value;
        if (!in || !(in >> std::ws).eof() || (std::is_unsigned_v<T> && text.starts_with("-"))) {
            throw UsageError("config: cannot parse " + key + "='" + text + "'");
        }
        return value;
    }
}

std::vector<std::size_t> parse_widths(const std::string& key, const std::string& text) {
    std::vector<std::size_t> out;
    if (text.empty() || text == "none") {
        return out;
    }
    std::istringstream in(text);
    std::string cell;
    while (std::getline(in, cell, ',')) {
        Settings one{{key, trim(cell)}};
        const auto w = parse_value<std::size_t>(one, key);
        if (w == 0) {
            throw UsageError("config: " + key + " entries must be positive");
        }
        out.push_back(w);
    }
    return out;
}

nxfr::TrainConfig train_config(const Settings& s) {
    nxfr::TrainConfig c;
    c.epochs = parse_value<std::size_t>(s, "epochs");
    c.learning_rate = parse_value<double>(s, "learning_rate");
    c.momentum = parse_value<double>(s, "momentum");
    c.batch_size = parse_value<std::size_t>(s, "batch_size");
    c.dropout_flatten = parse_value<double>(s, "dropout_flatten");
    c.dropout_dense = parse_value<double>(s, "dropout_dense");
    c.eval_fraction = parse_value<double>(s, "eval_fraction");
    c.seed = parse_value<std::uint64_t>(s, "seed");
    c.deterministic = parse_value<bool>(s, "deterministic");
    c.validate();
    return c;
}

nxfr::Architecture architecture(const Settings& s) {
    nxfr::Architecture a;
    a.conv_filters = parse_widths("conv_widths", s.at("conv_widths"));
    a.dense_units = parse_widths("dense_widths", s.at("dense_widths"));
    a.dropout_flatten = parse_value<double>(s, "dropout_flatten");
    a.dropout_dense = parse_value<double>(s, "dropout_dense");
    return a;
}

std::string join_widths(const std::vector<std::size_t>& w) {
    std::string out;
    for (auto v : w) {
        out += (out.empty() ? "" : ",") + std::to_string(v);
    }
    return out.empty() ? "none" : out;
}

// Flags that may appear on any training subcommand. Each one, when given,
// overrides the settings key it names.
class SettingFlags {
public:
    void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        auto& slot = values_[key];
        options_.emplace_back(key, app->add_option(flag, slot, help));
    }

    void apply(Settings& s) const {
        for (const auto& [key, opt] : options_) {
            if (opt->count() > 0) {
                s[key] = values_.at(key);
            }
        }
    }

private:
    std::map<std::string, std::string> values_;
    std::vector<std::pair<std::string, CLI::Option*>> options_;
};

void add_training_flags(CLI::App* app, SettingFlags& f) {
    f.add(app, "--epochs", "epochs", "Training epochs");
    f.add(app, "--lr", "learning_rate", "SGD learning rate");
    f.add(app, "--momentum", "momentum", "SGD momentum in [0,1)");
    f.add(app, "--batch", "batch_size", "Mini-batch size");
    f.add(app, "--dropout-flatten", "dropout_flatten", "Dropout rate after Flatten");
    f.add(app, "--dropout-dense", "dropout_dense", "Dropout rate after each hidden Dense layer");
    f.add(app, "--eval-fraction", "eval_fraction", "Per-class held-out fraction");
    f.add(app, "--seed", "seed", "Root seed; init/shuffle/dropout/split/synth streams derive from it");
    f.add(app, "--deterministic", "deterministic", "true|false (runs are single-threaded and reproducible)");
    f.add(app, "--samples", "samples", "Samples per class for --synth datasets");
    f.add(app, "--strict", "strict", "true|false: skip images that are not 32x32 instead of resampling");
}

Settings base_settings(std::size_t epochs) {
    const nxfr::TrainConfig d;
    const auto ref = nxfr::Architecture::reference();
    return {{"epochs", std::to_string(epochs)},
            {"learning_rate", nxfr::format_number(d.learning_rate)},
            {"momentum", nxfr::format_number(d.momentum)},
            {"batch_size", std::to_string(d.batch_size)},
            {"dropout_flatten", nxfr::format_number(d.dropout_flatten)},
            {"dropout_dense", nxfr::format_number(d.dropout_dense)},
            {"eval_fraction", nxfr::format_number(d.eval_fraction)},
            {"seed", std::to_string(d.seed)},
            {"deterministic", "true"},
            {"samples", "500"},
            {"strict", "false"},
            {"conv_widths", join_widths(ref.conv_filters)},
            {"dense_widths", join_widths(ref.dense_units)}};
}

// defaults < --config file < flags
Settings resolve(Settings defaults, const std::string& config_path, const SettingFlags& flags) {
    if (!config_path.empty()) {
        for (auto& [k, v] : read_config_file(config_path)) {
            if (!defaults.contains(k) && k != "data" && k != "synth" && k != "checkpoint" && k != "classifier" &&
                k != "any_architecture" && k != "command") {
                throw UsageError("config: unknown key '" + k + "'");
            }
            defaults[k] = v;
        }
    }
    flags.apply(defaults);
    return defaults;
}

// ---------------------------------------------------------------------------
// Datasets

std::string synth_name(const std::string& letter) {
    if (letter == "A" || letter == "a" || letter == "synthA") {
        return "synthA";
    }
    if (letter == "B" || letter == "b" || letter == "synthB") {
        return "synthB";
    }
    throw UsageError("--synth must be A or B, got '" + letter + "'");
}

// Loads a synthetic script, an NMDS archive, or an image directory, and
// splits it with the "split" stream of the root seed.
nxfr::LabeledDataset load_dataset(const Settings& s, std::ostream& log) {
    const auto seed = parse_value<std::uint64_t>(s, "seed");
    const auto fraction = parse_value<double>(s, "eval_fraction");
    nxfr::LabeledDataset d;
    const bool has_synth = s.contains("synth") && !s.at("synth").empty();
    const bool has_data = s.contains("data") && !s.at("data").empty();
    if (has_synth == has_data) {
        throw UsageError("exactly one of --data or --synth is required");
    }
    if (has_synth) {
        const auto script = synth_name(s.at("synth")) == "synthA" ? nxfr::SyntheticScript::A : nxfr::SyntheticScript::B;
        const auto samples = parse_value<std::size_t>(s, "samples");
        if (samples < 2) {
            throw UsageError("--samples must be at least 2");
        }
        d = nxfr::generate_synthetic(script, samples, nxfr::derive_seed(seed, "synth"));
    } else {
        const fs::path path = s.at("data");
        if (!fs::exists(path)) {
            throw nxfr::DatasetError("dataset: path does not exist: " + path.string());
        }
        if (fs::is_regular_file(path)) {
            d = nxfr::load_archive(path);
        } else {
            auto loaded = nxfr::load_directory(path, {.strict = parse_value<bool>(s, "strict")});
            for (const auto& w : loaded.warnings) {
                log << "warning: " << w << '\n';
            }
            d = std::move(loaded.dataset);
        }
    }
    return nxfr::stratified_split(std::move(d), fraction, nxfr::derive_seed(seed, "split"));
}

// ---------------------------------------------------------------------------
// Output

nxfr::EpochObserver<float> progress(std::ostream& log, bool quiet, std::string label, std::size_t total) {
    return [&log, quiet, label = std::move(label), total](const nxfr::EpochRecord& r, const nxfr::Model<float>&) {
        if (!quiet) {
            char line[160];
            std::snprintf(line, sizeof line, "[%s] epoch %zu/%zu  loss %.4f  train %.2f%%  eval %.2f%%\n",
                          label.c_str(), r.epoch, total, r.train_loss, 100 * r.train_accuracy, 100 * r.eval_accuracy);
            log << line << std::flush;
        }
        return true;
    };
}

void write_run_artifacts(const std::string& prefix, const nxfr::RunReport& run, const json& report,
                         const Settings& settings) {
    if (prefix.empty()) {
        return;
    }
    nxfr::write_text_file(prefix + ".csv", nxfr::records_csv(run));
    nxfr::write_text_file(prefix + ".json", report.dump(2) + "\n");
    nxfr::write_text_file(prefix + ".config", settings_text(settings));
}

// ---------------------------------------------------------------------------
// Subcommands

struct Common {
    std::string config;
    std::string out_report;
    bool quiet = false;
};

struct TrainOutcome {
    nxfr::FitResult<float> fit;
    std::string script;
};

TrainOutcome run_train(const Settings& s, std::ostream& log, bool quiet) {
    const auto cfg = train_config(s);
    const auto data = load_dataset(s, log);
    log << "train: " << data.name << ", " << data.count(nxfr::Partition::Train) << " train / "
        << data.count(nxfr::Partition::Eval) << " eval samples, " << cfg.epochs << " epochs\n";
    const auto model = nxfr::build_model<float>(nxfr::derive_seed(cfg.seed, "init"), architecture(s));
    auto fitted = nxfr::fit(model, data, cfg, progress(log, quiet, data.name, cfg.epochs));
    return {std::move(fitted), data.name};
}

nxfr::Provenance provenance_of(const TrainOutcome& t, const Settings& s) {
    nxfr::Provenance p;
    p.script = t.script;
    p.epoch_saved = t.fit.report.best_epoch;
    p.eval_accuracy = t.fit.report.best_eval_accuracy;
    p.seed = parse_value<std::uint64_t>(s, "seed");
    p.config = settings_json(s);
    return p;
}

int cmd_train(const Settings& s, const std::string& out_checkpoint, const Common& common) {
    const auto outcome = run_train(s, std::cerr, common.quiet);
    const auto& run = outcome.fit.report;
    for (const auto& w : run.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    if (!out_checkpoint.empty()) {
        nxfr::save_checkpoint(outcome.fit.best_model, provenance_of(outcome, s), out_checkpoint);
    }
    write_run_artifacts(common.out_report, run,
                        nxfr::standalone_report_json(outcome.script, run, settings_json(s)), s);
    std::cout << outcome.script << ": best eval accuracy " << nxfr::format_percent(run.best_eval_accuracy)
              << " at epoch " << run.best_epoch << " of " << run.records.size() << '\n';
    return kOk;
}

nxfr::TransferConfig transfer_config(const Settings& s) {
    nxfr::TransferConfig t;
    t.source_checkpoint = s.at("checkpoint");
    t.train = train_config(s);
    t.epochs = t.train.epochs;
    t.classifier_init = nxfr::parse_classifier_init(s.at("classifier"));
    if (parse_value<bool>(s, "any_architecture")) {
        t.expected_fingerprint.reset();
    }
    return t;
}

nxfr::TransferResult run_transfer(const nxfr::Checkpoint& source, const nxfr::LabeledDataset& target,
                                  const nxfr::TransferConfig& t) {
    if (t.expected_fingerprint && source.fingerprint != *t.expected_fingerprint) {
        throw nxfr::FingerprintMismatchError("checkpoint: architecture fingerprint " + source.fingerprint +
                                             " does not match expected " + *t.expected_fingerprint);
    }
    return nxfr::transfer_fit(source, target, t);
}

int cmd_transfer(const Settings& s, const std::string& out_checkpoint, const Common& common) {
    const auto t = transfer_config(s);
    const auto source = nxfr::load_checkpoint(t.source_checkpoint, t.expected_fingerprint);
    const auto target = load_dataset(s, std::cerr);
    std::cerr << "transfer: " << source.provenance.script << " -> " << target.name << ", classifier "
              << nxfr::to_string(t.classifier_init) << ", " << t.epochs << " epochs\n";
    const auto result = run_transfer(source, target, t);
    const auto& run = result.report.run;
    if (!out_checkpoint.empty()) {
        nxfr::Provenance p;
        p.script = target.name;
        p.epoch_saved = run.best_epoch;
        p.eval_accuracy = run.best_eval_accuracy;
        p.seed = t.train.seed;
        p.config = settings_json(s);
        nxfr::save_checkpoint(result.best_model, p, out_checkpoint);
    }
    write_run_artifacts(common.out_report, run, nxfr::transfer_report_json(result.report, settings_json(s)), s);
    std::cout << result.report.source_script << " -> " << result.report.target_script << ": best "
              << nxfr::format_percent(run.best_eval_accuracy) << " at epoch " << run.best_epoch << ", after 10 epochs "
              << (run.accuracy_at_10 ? nxfr::format_percent(*run.accuracy_at_10) : std::string("n/a")) << '\n';
    return kOk;
}

int exit_code_for(const std::exception& e);

struct MatrixOptions {
    std::vector<std::string> scripts;
    std::vector<std::string> pairs;
    std::string data_root;
    std::string out_dir = "matrix";
    std::size_t source_epochs = 300;
    bool keep_going = false;
    bool reuse = false;
    std::size_t jobs = 1;
};

// "synthA"/"synthB" are generated; other names resolve to <data_root>/<name>
// (a directory or <name>.nmds archive).
Settings script_settings(Settings s, const std::string& name, const std::string& data_root) {
    s.erase("synth");
    s.erase("data");
    if (name == "synthA" || name == "synthB") {
        s["synth"] = name;
        return s;
    }
    if (data_root.empty()) {
        throw UsageError("matrix: script '" + name + "' needs --data-root or NXFR_DATA_ROOT");
    }
    const fs::path dir = fs::path(data_root) / name;
    const fs::path archive = fs::path(data_root) / (name + ".nmds");
    s["data"] = fs::exists(dir) || !fs::exists(archive) ? dir.string() : archive.string();
    return s;
}

std::vector<std::pair<std::string, std::string>> matrix_pairs(const MatrixOptions& m) {
    std::vector<std::pair<std::string, std::string>> out;
    if (m.pairs.empty()) {
        for (const auto& a : m.scripts) {
            for (const auto& b : m.scripts) {
                if (a != b) {
                    out.emplace_back(a, b);
                }
            }
        }
        return out;
    }
    for (const auto& p : m.pairs) {
        const auto sep = p.find(':');
        if (sep == std::string::npos) {
            throw UsageError("matrix: pair '" + p + "' must be source:destination");
        }
        out.emplace_back(p.substr(0, sep), p.substr(sep + 1));
    }
    return out;
}

int cmd_matrix(const Settings& base, const MatrixOptions& m, const Common& common) {
    auto pairs = matrix_pairs(m);
    if (pairs.empty()) {
        throw UsageError("matrix: need at least two scripts or one --pair");
    }
    for (const auto& [a, b] : pairs) {
        if (a == b) {
            throw UsageError("matrix: pair " + a + ":" + b + " has the same source and destination");
        }
    }
    fs::create_directories(m.out_dir);
    const fs::path out = m.out_dir;

    std::vector<std::string> sources;
    for (const auto& p : pairs) {
        if (std::find(sources.begin(), sources.end(), p.first) == sources.end()) {
            sources.push_back(p.first);
        }
    }

    // Phase 1: one standalone model per source script.
    std::map<std::string, nxfr::Checkpoint> checkpoints;
    std::map<std::string, std::string> failed;
    int first_failure = kOk;
    for (const auto& name : sources) {
        const fs::path ck_path = out / (name + ".nxfr");
        try {
            if (m.reuse && fs::exists(ck_path)) {
                checkpoints[name] = nxfr::load_checkpoint(ck_path);
                std::cerr << "matrix: reusing " << ck_path.string() << '\n';
                continue;
            }
            Settings s = script_settings(base, name, m.data_root);
            s["epochs"] = std::to_string(m.source_epochs);
            s["command"] = "train";
            const auto outcome = run_train(s, std::cerr, common.quiet);
            const auto prov = provenance_of(outcome, s);
            nxfr::save_checkpoint(outcome.fit.best_model, prov, ck_path);
            write_run_artifacts((out / name).string(), outcome.fit.report,
                                nxfr::standalone_report_json(outcome.script, outcome.fit.report, settings_json(s)), s);
            checkpoints[name] = nxfr::load_checkpoint(ck_path);
        } catch (const std::exception& e) {
            std::cerr << "matrix: source " << name << " failed: " << e.what() << '\n';
            failed[name] = e.what();
            if (first_failure == kOk) {
                first_failure = exit_code_for(e);
            }
            if (!m.keep_going) {
                return first_failure;
            }
        }
    }

    // Phase 2: transfer runs, optionally several at once.
    std::vector<std::optional<nxfr::MatrixRow>> rows(pairs.size());
    std::mutex log_mutex;
    auto run_pair = [&](std::size_t i) -> int {
        const auto& [src, dst] = pairs[i];
        if (!checkpoints.contains(src)) {
            throw nxfr::DatasetError("matrix: no checkpoint for source " + src);
        }
        Settings s = script_settings(base, dst, m.data_root);
        s["checkpoint"] = (out / (src + ".nxfr")).string();
        s["command"] = "transfer";
        const auto t = transfer_config(s);
        nxfr::LabeledDataset target;
        {
            std::ostringstream log;
            target = load_dataset(s, log);
            std::lock_guard lock(log_mutex);
            std::cerr << log.str();
        }
        {
            std::lock_guard lock(log_mutex);
            std::cerr << "matrix: transfer " << src << " -> " << dst << '\n';
        }
        const auto result = run_transfer(checkpoints.at(src), target, t);
        const std::string prefix = (out / (src + "_to_" + dst)).string();
        write_run_artifacts(prefix, result.report.run, nxfr::transfer_report_json(result.report, settings_json(s)),
                            s);
        rows[i] = nxfr::matrix_row(result.report);
        if (!common.quiet) {
            std::lock_guard lock(log_mutex);
            const auto& run = result.report.run;
            std::cerr << "matrix: " << src << " -> " << dst << " best " << nxfr::format_percent(run.best_eval_accuracy)
                      << " at epoch " << run.best_epoch << '\n';
        }
        return kOk;
    };
    auto guarded = [&](std::size_t i) -> int {
        try {
            return run_pair(i);
        } catch (const std::exception& e) {
            std::lock_guard lock(log_mutex);
            std::cerr << "matrix: pair " << pairs[i].first << " -> " << pairs[i].second << " failed: " << e.what()
                      << '\n';
            return exit_code_for(e);
        }
    };

    std::vector<int> codes(pairs.size(), kOk);
    const std::size_t jobs = std::max<std::size_t>(1, m.jobs);
    for (std::size_t start = 0; start < pairs.size(); start += jobs) {
        std::vector<std::future<int>> running;
        for (std::size_t i = start; i < std::min(pairs.size(), start + jobs); ++i) {
            running.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, guarded, i));
        }
        bool stop = false;
        for (std::size_t k = 0; k < running.size(); ++k) {
            codes[start + k] = running[k].get();
            if (codes[start + k] != kOk) {
                if (first_failure == kOk) {
                    first_failure = codes[start + k];
                }
                stop = !m.keep_going;
            }
        }
        if (stop) {
            break;
        }
    }

    std::vector<nxfr::MatrixRow> done;
    for (const auto& r : rows) {
        if (r) {
            done.push_back(*r);
        }
    }
    nxfr::write_text_file(out / "matrix.csv", nxfr::matrix_csv(done));
    const std::string table = nxfr::matrix_table(done);
    nxfr::write_text_file(out / "matrix.txt", table);
    std::cout << table;
    return first_failure;
}

int cmd_report(const std::vector<std::string>& files, const std::string& series) {
    std::vector<json> reports;
    for (const auto& f : files) {
        reports.push_back(nxfr::read_json_file(f));
    }
    std::cout << nxfr::render_reports(reports);
    if (!series.empty()) {
        nxfr::write_text_file(series, nxfr::series_csv(reports));
    }
    return kOk;
}

int cmd_pack(const Settings& s, const std::string& out) {
    const fs::path path = s.at("data");
    auto loaded = nxfr::load_directory(path, {.strict = parse_value<bool>(s, "strict")});
    for (const auto& w : loaded.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    nxfr::save_archive(loaded.dataset, out);
    std::cout << "packed " << loaded.dataset.size() << " images (" << loaded.skipped << " skipped) into " << out
              << '\n';
    return kOk;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const nxfr::ConfigError*>(&e)) {
        return kUsage;
    }
    if (dynamic_cast<const nxfr::InvariantError*>(&e) || dynamic_cast<const nxfr::ShapeError*>(&e)) {
        return kInvariant;
    }
    if (dynamic_cast<const nxfr::Error*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) {
        return kData;
    }
    return kOther;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nxfr: numeral recognition with cross-script transfer learning", "nxfr"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("nxfr 1.0"));

    Common common;
    std::string data;
    std::string synth;
    std::string out_checkpoint;

    // train
    auto* train = app.add_subcommand("train", "Train a model from scratch and save the best weights");
    SettingFlags train_flags;
    add_training_flags(train, train_flags);
    train_flags.add(train, "--conv-widths", "conv_widths", "Comma-separated conv filter counts (default 64,64,64,32)");
    train_flags.add(train, "--dense-widths", "dense_widths", "Comma-separated hidden Dense widths (default 512,256,128)");
    train->add_option("--data", data, "Dataset directory root/{0..9}/ or .nmds archive");
    train->add_option("--synth", synth, "Synthetic script A or B instead of --data");
    train->add_option("--config", common.config, "key=value file (or a JSON echo); flags take precedence");
    train->add_option("--out-checkpoint", out_checkpoint, "Where to save the best weights (NXFR format)");
    train->add_option("--out-report", common.out_report, "Report prefix: writes PREFIX.csv, PREFIX.json, PREFIX.config");
    train->add_flag("--quiet", common.quiet, "No per-epoch progress lines");

    // transfer
    auto* transfer = app.add_subcommand("transfer", "Freeze a checkpoint's feature extractor and retrain on a target");
    SettingFlags transfer_flags;
    add_training_flags(transfer, transfer_flags);
    transfer_flags.add(transfer, "--checkpoint", "checkpoint", "Source checkpoint (NXFR)");
    transfer_flags.add(transfer, "--classifier", "classifier", "reinitialize (default) or retain");
    transfer_flags.add(transfer, "--any-architecture", "any_architecture",
                       "true|false: accept checkpoints whose architecture differs from the reference network");
    transfer->add_option("--data", data, "Target dataset directory or .nmds archive");
    transfer->add_option("--synth", synth, "Synthetic target script A or B");
    transfer->add_option("--config", common.config, "key=value file (or a JSON echo); flags take precedence");
    transfer->add_option("--out-checkpoint", out_checkpoint, "Where to save the retrained model");
    transfer->add_option("--out-report", common.out_report, "Report prefix: writes PREFIX.csv, PREFIX.json, PREFIX.config");
    transfer->add_flag("--quiet", common.quiet, "No per-epoch progress lines");

    // matrix
    auto* matrix = app.add_subcommand("matrix", "Train each source script, then run every source->target transfer");
    SettingFlags matrix_flags;
    add_training_flags(matrix, matrix_flags);
    matrix_flags.add(matrix, "--conv-widths", "conv_widths", "Comma-separated conv filter counts");
    matrix_flags.add(matrix, "--dense-widths", "dense_widths", "Comma-separated hidden Dense widths");
    matrix_flags.add(matrix, "--classifier", "classifier", "reinitialize (default) or retain");
    matrix_flags.add(matrix, "--any-architecture", "any_architecture", "true|false: allow non-reference widths");
    MatrixOptions mopt;
    matrix->add_option("--scripts", mopt.scripts, "Script names; synthA/synthB are generated, others load from the data root")
        ->delimiter(',');
    matrix->add_option("--pair", mopt.pairs, "Explicit source:destination pair (repeatable); default all ordered pairs");
    matrix->add_option("--data-root", mopt.data_root, "Directory holding one corpus per script")->envname("NXFR_DATA_ROOT");
    matrix->add_option("--out-dir", mopt.out_dir, "Output directory for checkpoints and reports");
    matrix->add_option("--source-epochs", mopt.source_epochs, "Epochs for the standalone source runs");
    matrix->add_option("--jobs", mopt.jobs, "Run up to this many transfer pairs concurrently");
    matrix->add_option("--config", common.config, "key=value file; flags take precedence");
    matrix->add_flag("--keep-going", mopt.keep_going, "Continue with remaining pairs after a failure");
    matrix->add_flag("--reuse-checkpoints", mopt.reuse, "Skip source training when OUT_DIR/<script>.nxfr exists");
    matrix->add_flag("--quiet", common.quiet, "No per-epoch progress lines");

    // report
    auto* report = app.add_subcommand("report", "Render saved JSON reports as tables");
    std::vector<std::string> report_files;
    std::string series;
    report->add_option("reports", report_files, "Report JSON files")->required();
    report->add_option("--series", series, "Also write an epoch-by-epoch CSV for plotting");

    // pack
    auto* pack = app.add_subcommand("pack", "Decode an image directory into an NMDS archive");
    SettingFlags pack_flags;
    pack_flags.add(pack, "--strict", "strict", "true|false: skip images that are not 32x32");
    std::string pack_out;
    pack->add_option("--data", data, "Dataset directory root/{0..9}/")->required();
    pack->add_option("--out", pack_out, "Archive path")->required();

    if (argc <= 1) {
        std::cerr << app.help();
        return kUsage;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    CLI::App* active = app.get_subcommands().front();
    try {
        auto with_source = [&](Settings s) {
            if (!data.empty()) {
                s["data"] = data;
            }
            if (!synth.empty()) {
                s["synth"] = synth_name(synth);
            }
            if (s.contains("data") && s.contains("synth") && !data.empty()) {
                s.erase("synth");
            }
            if (s.contains("data") && s.contains("synth") && !synth.empty()) {
                s.erase("data");
            }
            return s;
        };
        if (active == train) {
            Settings s = with_source(resolve(base_settings(300), common.config, train_flags));
            s["command"] = "train";
            return cmd_train(s, out_checkpoint, common);
        }
        if (active == transfer) {
            Settings defaults = base_settings(100);
            defaults["classifier"] = "reinitialize";
            defaults["any_architecture"] = "false";
            Settings s = with_source(resolve(defaults, common.config, transfer_flags));
            s.erase("conv_widths");
            s.erase("dense_widths");
            s["command"] = "transfer";
            if (!s.contains("checkpoint") || s.at("checkpoint").empty()) {
                throw UsageError("transfer: --checkpoint is required");
            }
            return cmd_transfer(s, out_checkpoint, common);
        }
        if (active == matrix) {
            Settings defaults = base_settings(100);
            defaults["classifier"] = "reinitialize";
            defaults["any_architecture"] = "false";
            const Settings s = resolve(defaults, common.config, matrix_flags);
            return cmd_matrix(s, mopt, common);
        }
        if (active == report) {
            return cmd_report(report_files, series);
        }
        if (active == pack) {
            Settings s = base_settings(1);
            pack_flags.apply(s);
            s["data"] = data;
            return cmd_pack(s, pack_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "nxfr " << active->get_name() << ": error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return kOther;
}
