#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run(const std::string& cmd) {
    const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

const std::string kBin = GRANVIT_CLI_PATH;

class CliPipeline : public ::testing::Test {
protected:
    static fs::path dir() { return fs::temp_directory_path() / "granvit_cli_test"; }

    static void SetUpTestSuite() {
        fs::remove_all(dir());
        fs::create_directories(dir());
        std::ofstream cfg(dir() / "cfg.json");
        cfg << R"({"model": {"img_px": 16, "patch_px": 4, "d_model": 16, "n_heads": 2,)"
            << R"( "enc_layers": 1, "dec_layers": 1, "ffn_mult": 2, "max_seq": 176},)"
            << R"( "stage1": {"steps": 3, "batch_size": 2}, "stage2": {"steps": 3, "batch_size": 2}})";
    }
};

}  // namespace

TEST_F(CliPipeline, FullChainSucceeds) {
    const std::string base = kBin + " --config " + (dir() / "cfg.json").string() + " --seed 5 ";
    ASSERT_EQ(run(base + "synth --n 6 --out " + (dir() / "synth").string()), 0);
    ASSERT_EQ(run(base + "curate --in '" + (dir() / "synth" / "records-*.jsonl").string() +
                  "' --out " + (dir() / "curated").string()),
              0);
    ASSERT_EQ(run(base + "train --stage 1 --corpus " + (dir() / "curated").string() +
                  " --images-root " + (dir() / "synth").string() + " --out " +
                  (dir() / "m.stage1").string()),
              0);
    ASSERT_EQ(run(base + "train --stage 2 --corpus " + (dir() / "curated").string() +
                  " --images-root " + (dir() / "synth").string() + " --init " +
                  (dir() / "m.stage1").string() + " --out " + (dir() / "m.stage2").string()),
              0);
    ASSERT_EQ(run(base + "eval --ckpt " + (dir() / "m.stage2").string() + " --set " +
                  (dir() / "curated").string() + " --images-root " + (dir() / "synth").string() +
                  " --task c2b --max-new 6 --out " + (dir() / "c2b.json").string()),
              0);
    ASSERT_EQ(run(base + "report --stage1-trace " + (dir() / "m.stage1.trace.csv").string() +
                  " --stage2-trace " + (dir() / "m.stage2.trace.csv").string() + " --eval " +
                  (dir() / "c2b.json").string() + " --out " + (dir() / "summary.json").string()),
              0);

    const json summary = json::parse(slurp(dir() / "summary.json"));
    EXPECT_EQ(summary.at("stage1").at("steps").get<int>(), 3);
    EXPECT_EQ(summary.at("stage2").at("steps").get<int>(), 3);
    ASSERT_EQ(summary.at("evals").size(), 1u);

    // The effective config is echoed next to outputs and reproduces itself.
    EXPECT_TRUE(fs::exists(dir() / "curated" / "config.echo.json"));
    const json echoed = json::parse(slurp(dir() / "curated" / "config.echo.json"));
    EXPECT_EQ(echoed.at("seed").get<int>(), 5);
    EXPECT_EQ(echoed.at("model").at("d_model").get<int>(), 16);
}

TEST_F(CliPipeline, Stage2RequiresCheckpoint) {
    const std::string base = kBin + " --config " + (dir() / "cfg.json").string() + " --seed 5 ";
    EXPECT_EQ(run(base + "train --stage 2 --corpus " + (dir() / "curated").string() +
                  " --images-root " + (dir() / "synth").string() + " --init fresh --out " +
                  (dir() / "bad.ckpt").string()),
              2);
}

TEST_F(CliPipeline, UsageAndConfigErrorsExitTwo) {
    EXPECT_EQ(run(kBin + " frobnicate"), 2);
    EXPECT_EQ(run(kBin + " synth --n 3"), 2);  // missing --out
    std::ofstream bad(dir() / "bad_cfg.json");
    bad << R"({"modle": {}})";
    bad.close();
    EXPECT_EQ(run(kBin + " --config " + (dir() / "bad_cfg.json").string() + " synth --n 3 --out " +
                  (dir() / "x").string()),
              2);
}

TEST_F(CliPipeline, IoFailuresExitOne) {
    EXPECT_EQ(run(kBin + " curate --in /nonexistent/nothing-*.jsonl --out " + (dir() / "y").string()),
              1);
    EXPECT_EQ(run(kBin + " eval --ckpt /nonexistent.ckpt --set x --images-root y --task b2c"), 1);
}
