// Runs the dendplrnn executable end to end on small configs.
#include <dendplrnn/checkpoint.hpp>
#include <dendplrnn/dynsys.hpp>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const json kSmall = json::parse(R"({
  "seed": 3,
  "system": {"kind": "lorenz63"},
  "data": {"train_length": 2000, "test_length": 1500, "transient": 200},
  "train": {"M": 6, "B": 2, "tau": 10, "seq_len": 50, "batch_size": 4, "epochs": 2, "checkpoint_every": 1},
  "metrics": {"transient": 100, "compute_gmm": false, "pe_steps": [1, 5]},
  "analysis": {"max_period": 3, "field_resolution": 5},
  "sweep": {"M": [4], "B": [0, 2], "seeds": [0, 1]}
})");

class Cli : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("dendplrnn_cli_") + info->name() + "_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string path(const std::string& name) const { return (dir / name).string(); }

    std::string write_config(const json& j, const std::string& name = "config.json") const {
        std::ofstream(path(name)) << j.dump(2);
        return path(name);
    }

    /// Exit status of the executable; stdout/stderr go to files in the test dir.
    int run(const std::string& args) const {
        const std::string cmd = std::string("\"") + DENDPLRNN_CLI_PATH + "\" " + args + " > \"" + path("stdout.txt") +
                                "\" 2> \"" + path("stderr.txt") + "\"";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string slurp(const std::string& name) const {
        std::ifstream in(path(name));
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }
};

std::size_t data_rows(const std::string& file) {
    std::ifstream in(file);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line))
        if (!line.empty() && line[0] != '#' && line[0] != 'x') ++n;
    return n;
}

std::size_t columns(const std::string& file) {
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty() && line[0] == 'x') return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    return 0;
}

} // namespace

TEST_F(Cli, GenerateWritesDatasetWithProvenance) {
    const auto cfg = write_config(kSmall);
    ASSERT_EQ(run("generate -c " + cfg + " -o " + path("data")), 0) << slurp("stderr.txt");
    EXPECT_EQ(data_rows(path("data/train.csv")), 2000u);
    EXPECT_EQ(data_rows(path("data/test.csv")), 1500u);
    EXPECT_EQ(columns(path("data/train.csv")), 3u);
    std::ifstream in(path("data/provenance.json"));
    const json prov = json::parse(in);
    const std::string first_line = slurp("data/train.csv").substr(0, slurp("data/train.csv").find('\n'));
    EXPECT_EQ(first_line, "# data_hash: " + prov["data_hash"].get<std::string>());
    EXPECT_EQ(prov["standardization"]["mean"].size(), 3u);
}

TEST_F(Cli, GenerateIsDeterministic) {
    const auto cfg = write_config(kSmall);
    ASSERT_EQ(run("generate -c " + cfg + " -o " + path("a")), 0);
    ASSERT_EQ(run("generate -c " + cfg + " -o " + path("b")), 0);
    EXPECT_EQ(slurp("a/train.csv"), slurp("b/train.csv"));
    EXPECT_EQ(slurp("a/test.csv"), slurp("b/test.csv"));
    ASSERT_EQ(run("generate -c " + cfg + " --seed 4 -o " + path("c")), 0);
    EXPECT_NE(slurp("a/train.csv"), slurp("c/train.csv"));
}

TEST_F(Cli, ConditionsShapeTheData) {
    const auto cfg = write_config(kSmall);
    ASSERT_EQ(run("generate -c " + cfg + " --condition low_data -o " + path("low")), 0) << slurp("stderr.txt");
    EXPECT_EQ(data_rows(path("low/train.csv")), 1000u);

    ASSERT_EQ(run("generate -c " + cfg + " --condition partial_observation -o " + path("partial")), 0);
    EXPECT_EQ(columns(path("partial/train.csv")), 1u);

    ASSERT_EQ(run("generate -c " + cfg + " --condition partial_observation --embed m=3 lag=10 -o " + path("embed")), 0)
        << slurp("stderr.txt");
    EXPECT_EQ(columns(path("embed/train.csv")), 3u);
    EXPECT_EQ(data_rows(path("embed/train.csv")), 2000u - 20u);

    EXPECT_EQ(run("generate -c " + cfg + " --embed m=3 lag=10 -o " + path("bad")), 2);
}

TEST_F(Cli, ConfigErrorsExitTwoWithJson) {
    json bad = kSmall;
    bad["train"]["learning_rate"] = 0.1;
    EXPECT_EQ(run("generate -c " + write_config(bad) + " -o " + path("d")), 2);
    const json err = json::parse(slurp("stderr.txt"));
    EXPECT_EQ(err["error"]["kind"], "config");
    EXPECT_NE(err["error"]["message"].get<std::string>().find("train.learning_rate"), std::string::npos);

    bad = kSmall;
    bad["train"]["tau"] = -1;
    EXPECT_EQ(run("generate -c " + write_config(bad) + " -o " + path("d")), 2);

    std::ofstream(path("broken.json")) << "{ not json";
    EXPECT_EQ(run("generate -c " + path("broken.json") + " -o " + path("d")), 2);
    EXPECT_EQ(run("generate -c " + path("missing.json") + " -o " + path("d")), 2);
    EXPECT_EQ(run("generate -o " + path("d")), 2);
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, TrainEvaluateAnalyzeRoundTrip) {
    const auto cfg = write_config(kSmall);
    ASSERT_EQ(run("generate -c " + cfg + " -o " + path("data")), 0);
    ASSERT_EQ(run("train -c " + cfg + " -d " + path("data") + " -o " + path("run") + " --epochs 1"), 0)
        << slurp("stderr.txt");
    ASSERT_TRUE(fs::exists(path("run/checkpoint.json")));
    ASSERT_TRUE(fs::exists(path("run/train_log.jsonl")));

    const auto ck = dendplrnn::load_checkpoint(path("run/checkpoint.json"));
    EXPECT_EQ(ck.params.M(), 6u);
    EXPECT_EQ(ck.params.B(), 2u);
    EXPECT_EQ(ck.meta["epochs_completed"], 1);
    dendplrnn::save_checkpoint(path("copy.json"), ck.params, ck.variant, ck.meta);
    const auto again = dendplrnn::load_checkpoint(path("copy.json"));
    EXPECT_EQ(again.params.A(), ck.params.A());
    EXPECT_EQ(again.params.W(), ck.params.W());
    EXPECT_EQ(again.params.L(), ck.params.L());

    const std::string ev = "evaluate -c " + cfg + " -k " + path("run/checkpoint.json") + " -d " + path("data");
    ASSERT_EQ(run(ev + " -r " + path("r1.json")), 0) << slurp("stderr.txt");
    ASSERT_EQ(run(ev + " -r " + path("r2.json")), 0);
    EXPECT_EQ(slurp("r1.json"), slurp("r2.json"));
    const json report = json::parse(slurp("r1.json"));
    for (const char* key : {"dstsp_bin", "psc", "pe", "success", "config_hash", "data_hash"})
        EXPECT_TRUE(report.contains(key)) << key;
    EXPECT_EQ(report["data_hash"], ck.meta["data_hash"]);

    ASSERT_EQ(run("analyze -c " + cfg + " -k " + path("run/checkpoint.json") + " -d " + path("data") + " -o " +
                  path("an")),
              0)
        << slurp("stderr.txt");
    const json an = json::parse(slurp("an/analysis.json"));
    ASSERT_TRUE(an["fixed_points"].is_array());
    for (const auto& f : an["fixed_points"]) {
        EXPECT_EQ(f["eigenvalues"].size(), 6u);
        EXPECT_TRUE(f.contains("stability"));
    }
    EXPECT_TRUE(an["cycles"].is_array());
    EXPECT_EQ(data_rows(path("an/vector_field.csv")), 25u);
    EXPECT_TRUE(fs::exists(path("an/trajectory.csv")));
}

TEST_F(Cli, TrainingIsDeterministic) {
    const auto cfg = write_config(kSmall);
    ASSERT_EQ(run("generate -c " + cfg + " -o " + path("data")), 0);
    ASSERT_EQ(run("train -c " + cfg + " -d " + path("data") + " -o " + path("a") + " --epochs 1"), 0);
    ASSERT_EQ(run("train -c " + cfg + " -d " + path("data") + " -o " + path("b") + " --epochs 1"), 0);
    const auto a = dendplrnn::load_checkpoint(path("a/checkpoint.json"));
    const auto b = dendplrnn::load_checkpoint(path("b/checkpoint.json"));
    EXPECT_EQ(a.params.W(), b.params.W());
    EXPECT_EQ(a.params.thresholds(), b.params.thresholds());
}

TEST_F(Cli, EvaluateRefusesForeignDataUnlessForced) {
    const auto cfg = write_config(kSmall);
    ASSERT_EQ(run("generate -c " + cfg + " -o " + path("data")), 0);
    ASSERT_EQ(run("generate -c " + cfg + " --seed 9 -o " + path("other")), 0);
    ASSERT_EQ(run("train -c " + cfg + " -d " + path("data") + " -o " + path("run") + " --epochs 1"), 0);
    const std::string ev = "evaluate -c " + cfg + " -k " + path("run/checkpoint.json") + " -d " + path("other") +
                           " -r " + path("r.json");
    EXPECT_EQ(run(ev), 2);
    EXPECT_NE(slurp("stderr.txt").find("data_hash"), std::string::npos);
    ASSERT_EQ(run(ev + " --force"), 0);
    EXPECT_EQ(json::parse(slurp("r.json"))["forced"], true);
}

TEST_F(Cli, SweepWritesSummary) {
    json cfg = kSmall;
    cfg["train"]["epochs"] = 1;
    ASSERT_EQ(run("sweep -c " + write_config(cfg) + " -o " + path("sw") + " -j 2"), 0) << slurp("stderr.txt");
    const std::string summary = slurp("sw/summary.csv");
    ASSERT_EQ(summary.rfind("# data_hash: ", 0), 0u);
    const auto header_start = summary.find('\n') + 1;
    EXPECT_EQ(summary.substr(header_start, summary.find('\n', header_start) - header_start), "M,B,seed,dstsp_bin,psc,pe20,success");
    EXPECT_EQ(data_rows(path("sw/summary.csv")), 4u + 1u);  // header starts with 'M', not 'x'
    EXPECT_TRUE(fs::exists(path("sw/success_rate.csv")));
    EXPECT_TRUE(fs::exists(path("sw/M4_B2_seed1/checkpoint.json")));
}
