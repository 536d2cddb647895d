#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "nxfr/report.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(NXFR_CLI_PATH) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
        return r;
    }
    char buf[4096];
    while (const auto n = std::fread(buf, 1, sizeof buf, pipe)) {
        r.output.append(buf, n);
    }
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "nxfr_cli_tests";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }
    static std::string at(const std::string& name) { return (dir_ / name).string(); }

    static inline fs::path dir_;
};

constexpr const char* kSmall = " --conv-widths 4,4 --dense-widths 16 --quiet";

TEST_F(Cli, NoArgumentsPrintsUsage) {
    const auto r = run("");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("Usage"), std::string::npos);
    EXPECT_NE(r.output.find("transfer"), std::string::npos);
}

TEST_F(Cli, HelpPerSubcommand) {
    for (const char* sub : {"train", "transfer", "matrix", "report", "pack"}) {
        const auto r = run(std::string(sub) + " --help");
        EXPECT_EQ(r.code, 0) << sub;
        EXPECT_NE(r.output.find("--"), std::string::npos) << sub;
    }
}

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("train --synth A --epochs zero").code, 2);
    EXPECT_EQ(run("train --synth A --epochs 0").code, 2);
    EXPECT_EQ(run("train --synth C").code, 2);
    EXPECT_EQ(run("train --epochs 1").code, 2);  // no data source
    EXPECT_EQ(run("train --synth A --no-such-flag").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, MissingDatasetNamesThePath) {
    const auto r = run("train --data " + at("no_such_corpus") + " --epochs 1");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.output.find("no_such_corpus"), std::string::npos);
}

// Reference network, 50 samples per class, 20 epochs; its checkpoint feeds
// the transfer tests below.
TEST_F(Cli, TrainThenTransferOnReferenceNetwork) {
    const auto train = run("train --synth A --samples 50 --epochs 20 --seed 7 --quiet --out-checkpoint " +
                           at("ref.nxfr") + " --out-report " + at("ref"));
    ASSERT_EQ(train.code, 0) << train.output;
    const auto report = nxfr::read_json_file(at("ref.json"));
    EXPECT_EQ(report["kind"], "standalone");
    EXPECT_EQ(report["records"].size(), 20u);
    EXPECT_EQ(report["config"]["seed"], "7");
    const std::string csv = slurp(at("ref.csv"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 21);

    const auto transfer = run("transfer --checkpoint " + at("ref.nxfr") +
                              " --synth B --samples 50 --epochs 30 --seed 7 --quiet --out-report " + at("xfer"));
    ASSERT_EQ(transfer.code, 0) << transfer.output;
    const auto x = nxfr::read_json_file(at("xfer.json"));
    EXPECT_EQ(x["kind"], "transfer");
    EXPECT_EQ(x["records"].size(), 30u);
    EXPECT_TRUE(x["accuracy_at_10"].is_number());
    EXPECT_EQ(x["frozen_drift_free"], true);
    EXPECT_EQ(x["classifier_init"], "reinitialize");
    EXPECT_EQ(x["source_script"], "synthA");

    const auto retain = run("transfer --checkpoint " + at("ref.nxfr") +
                            " --synth B --samples 10 --epochs 1 --quiet --classifier retain --out-report " + at("keep"));
    ASSERT_EQ(retain.code, 0) << retain.output;
    const auto k = nxfr::read_json_file(at("keep.json"));
    EXPECT_EQ(k["classifier_init"], "retain");
    EXPECT_EQ(k["config"]["classifier"], "retain");
}

TEST_F(Cli, FingerprintMismatchIsDiagnosed) {
    ASSERT_EQ(run("train --synth A --samples 5 --epochs 1" + std::string(kSmall) + " --out-checkpoint " + at("small.nxfr"))
                  .code,
              0);
    const auto r = run("transfer --checkpoint " + at("small.nxfr") + " --synth B --samples 5 --epochs 1 --quiet");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.output.find("fingerprint"), std::string::npos);
    EXPECT_EQ(run("transfer --checkpoint " + at("small.nxfr") +
                  " --synth B --samples 5 --epochs 1 --quiet --any-architecture true")
                  .code,
              0);
}

TEST_F(Cli, ConfigEchoReproducesRun) {
    ASSERT_EQ(run("train --synth B --samples 8 --epochs 4 --seed 11" + std::string(kSmall) + " --out-report " + at("orig"))
                  .code,
              0);
    ASSERT_EQ(run("train --config " + at("orig.config") + " --quiet --out-report " + at("again")).code, 0);
    EXPECT_EQ(slurp(at("orig.csv")), slurp(at("again.csv")));
    // The JSON report works as an echo too.
    ASSERT_EQ(run("train --config " + at("orig.json") + " --quiet --out-report " + at("again2")).code, 0);
    EXPECT_EQ(slurp(at("orig.csv")), slurp(at("again2.csv")));
    EXPECT_EQ(slurp(at("orig.config")), slurp(at("again2.config")));
}

TEST_F(Cli, FlagsOverrideConfigOverrideDefaults) {
    {
        std::ofstream cfg(at("p.config"));
        cfg << "# comment\nsynth = A\nsamples=4\nepochs=2\nconv_widths=2\ndense_widths=4\n";
    }
    ASSERT_EQ(run("train --config " + at("p.config") + " --quiet --out-report " + at("p2")).code, 0);
    EXPECT_EQ(nxfr::read_json_file(at("p2.json"))["records"].size(), 2u);
    EXPECT_EQ(nxfr::read_json_file(at("p2.json"))["config"]["batch_size"], "64");
    ASSERT_EQ(run("train --config " + at("p.config") + " --epochs 3 --quiet --out-report " + at("p3")).code, 0);
    EXPECT_EQ(nxfr::read_json_file(at("p3.json"))["records"].size(), 3u);
    {
        std::ofstream bad(at("bad.config"));
        bad << "epochz=3\n";
    }
    EXPECT_EQ(run("train --config " + at("bad.config") + " --synth A").code, 2);
}

TEST_F(Cli, MatrixTwoScriptsAndReparse) {
    const auto r = run("matrix --scripts synthA,synthB --samples 6 --source-epochs 2 --epochs 10" + std::string(kSmall) +
                       " --any-architecture true --out-dir " + at("m"));
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rows = nxfr::parse_matrix_csv(slurp(at("m/matrix.csv")));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].source, "synthA");
    EXPECT_EQ(rows[0].destination, "synthB");
    EXPECT_EQ(rows[1].source, "synthB");
    for (const auto& row : rows) {
        const auto j = nxfr::read_json_file(at("m/" + row.source + "_to_" + row.destination + ".json"));
        EXPECT_EQ(row.best_accuracy, j["best_eval_accuracy"].get<double>());
        EXPECT_EQ(row.best_epoch, j["best_epoch"].get<std::size_t>());
        EXPECT_EQ(*row.accuracy_after_10, j["accuracy_at_10"].get<double>());
    }
    EXPECT_NE(r.output.find("Destination Task"), std::string::npos);

    const auto parallel = run("matrix --scripts synthA,synthB --samples 6 --source-epochs 2 --epochs 10" +
                              std::string(kSmall) + " --any-architecture true --jobs 2 --out-dir " + at("m2"));
    ASSERT_EQ(parallel.code, 0) << parallel.output;
    EXPECT_EQ(slurp(at("m/matrix.csv")), slurp(at("m2/matrix.csv")));
}

TEST_F(Cli, MatrixKeepGoing) {
    const std::string common = " --samples 4 --source-epochs 1 --epochs 1" + std::string(kSmall) +
                               " --any-architecture true --data-root " + at("empty_root") + " --pair synthA:synthB" +
                               " --pair synthA:urdu --pair synthB:synthA";
    fs::create_directories(at("empty_root"));
    const auto stop = run("matrix" + common + " --out-dir " + at("k1"));
    EXPECT_EQ(stop.code, 3);
    EXPECT_EQ(nxfr::parse_matrix_csv(slurp(at("k1/matrix.csv"))).size(), 1u);
    const auto go = run("matrix" + common + " --keep-going --out-dir " + at("k2"));
    EXPECT_EQ(go.code, 3);
    EXPECT_EQ(nxfr::parse_matrix_csv(slurp(at("k2/matrix.csv"))).size(), 2u);
    EXPECT_NE(go.output.find("urdu"), std::string::npos);
    EXPECT_EQ(run("matrix --scripts synthA --out-dir " + at("k3")).code, 2);
}

TEST_F(Cli, ReportSections) {
    ASSERT_EQ(run("train --synth A --samples 4 --epochs 2" + std::string(kSmall) + " --out-report " + at("s1") +
                  " --out-checkpoint " + at("s1.nxfr"))
                  .code,
              0);
    ASSERT_EQ(run("transfer --checkpoint " + at("s1.nxfr") + " --synth B --samples 4 --epochs 2 --quiet" +
                  " --any-architecture true --out-report " + at("t1"))
                  .code,
              0);
    const auto single = run("report " + at("s1.json"));
    EXPECT_EQ(single.code, 0);
    EXPECT_EQ(std::count(single.output.begin(), single.output.end(), '\n'), 3);
    const auto mixed = run("report " + at("t1.json") + " " + at("s1.json") + " --series " + at("series.csv"));
    EXPECT_EQ(mixed.code, 0);
    EXPECT_LT(mixed.output.find("Standalone"), mixed.output.find("Transfer"));
    EXPECT_EQ(slurp(at("series.csv")).substr(0, 4), "run,");
    EXPECT_EQ(run("report").code, 2);
    {
        std::ofstream(at("junk.json")) << "{\"kind\": \"standalone\"}";
    }
    EXPECT_EQ(run("report " + at("junk.json")).code, 3);
}

TEST_F(Cli, PackThenTrainFromArchive) {
    const fs::path root = dir_ / "corpus";
    for (int c = 0; c < 10; ++c) {
        fs::create_directories(root / std::to_string(c));
        for (int k = 0; k < 3; ++k) {
            cv::Mat img(32, 32, CV_8UC1, cv::Scalar(255));
            img(cv::Rect(2 * c, 3 + k, 5, 9)).setTo(cv::Scalar(0));
            cv::imwrite((root / std::to_string(c) / (std::to_string(k) + ".png")).string(), img);
        }
    }
    const auto pack = run("pack --data " + root.string() + " --out " + at("corpus.nmds"));
    ASSERT_EQ(pack.code, 0) << pack.output;
    EXPECT_NE(pack.output.find("30 images"), std::string::npos);
    const auto from_dir = run("train --data " + root.string() + " --epochs 2" + std::string(kSmall) + " --out-report " +
                              at("dir"));
    const auto from_archive = run("train --data " + at("corpus.nmds") + " --epochs 2" + std::string(kSmall) +
                                  " --out-report " + at("arch"));
    ASSERT_EQ(from_dir.code, 0) << from_dir.output;
    ASSERT_EQ(from_archive.code, 0) << from_archive.output;
    EXPECT_EQ(slurp(at("dir.csv")), slurp(at("arch.csv")));
}

}  // namespace
