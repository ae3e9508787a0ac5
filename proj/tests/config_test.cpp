#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "granvit/config.hpp"

using namespace granvit;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST(RunConfig, DefaultsMatchDocumentedValues) {
    const RunConfig cfg;
    EXPECT_EQ(cfg.curation.min_short_side_px, 448);
    EXPECT_DOUBLE_EQ(cfg.curation.aspect_ratio_lo, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(cfg.curation.aspect_ratio_hi, 3.0);
    EXPECT_DOUBLE_EQ(cfg.curation.min_bbox_area_px2, 10000.0);
    EXPECT_EQ(cfg.curation.min_regions, 1);

    EXPECT_EQ(cfg.model.img_px, 64u);
    EXPECT_EQ(cfg.model.patch_px, 8u);
    EXPECT_EQ(cfg.model.d_model, 64u);
    EXPECT_EQ(cfg.model.vocab, 260u);

    EXPECT_DOUBLE_EQ(cfg.stage1.lambda, 1.0);
    EXPECT_DOUBLE_EQ(cfg.stage1.alpha, 0.9);
    EXPECT_DOUBLE_EQ(cfg.stage1.adamw.lr, 1e-3);
    EXPECT_DOUBLE_EQ(cfg.stage1.adamw.beta1, 0.9);
    EXPECT_DOUBLE_EQ(cfg.stage1.adamw.beta2, 0.999);
    EXPECT_DOUBLE_EQ(cfg.stage1.adamw.eps, 1e-8);
    EXPECT_DOUBLE_EQ(cfg.stage1.adamw.weight_decay, 0.01);

    const auto mix1 = cfg.stage1.effective_task_mix();
    EXPECT_EQ(mix1.size(), 2u);
    EXPECT_DOUBLE_EQ(mix1.at("GlobalCaption"), 1.0);
    EXPECT_DOUBLE_EQ(mix1.at("Bbox2Caption"), 1.0);
    const auto mix2 = cfg.stage2.effective_task_mix();
    EXPECT_DOUBLE_EQ(mix2.at("Caption2Bbox"), 1.0);
    EXPECT_FALSE(cfg.stage2.distill);
}

TEST(RunConfig, UnknownKeysAreHardErrors) {
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"sead": 1})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"model": {"d_modle": 32}})")),
                 ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"stage1": {"lamda": 0.5}})")),
                 ConfigError);
    EXPECT_THROW(
        RunConfig::from_json(nlohmann::json::parse(R"({"curation": {"min_short_side": 100}})")),
        ConfigError);
}

TEST(RunConfig, TypeAndInvariantViolations) {
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"seed": "seven"})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"stage1": {"alpha": 1.5}})")),
                 ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"stage1": {"lambda": -1.0}})")),
                 ConfigError);
    EXPECT_THROW(
        RunConfig::from_json(nlohmann::json::parse(R"({"stage1": {"task_mix": {"BadTask": 1.0}}})")),
        ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"model": {"patch_px": 7}})")),
                 ConfigError);
}

TEST(RunConfig, PartialOverridesKeepOtherDefaults) {
    const RunConfig cfg = RunConfig::from_json(
        nlohmann::json::parse(R"({"seed": 9, "stage1": {"steps": 42, "lr": 0.01}})"));
    EXPECT_EQ(cfg.seed, 9u);
    EXPECT_EQ(cfg.stage1.steps, 42);
    EXPECT_DOUBLE_EQ(cfg.stage1.adamw.lr, 0.01);
    EXPECT_DOUBLE_EQ(cfg.stage1.alpha, 0.9);          // untouched default
    EXPECT_EQ(cfg.curation.min_short_side_px, 448);   // untouched section
}

TEST(RunConfig, EchoRoundTripsExactly) {
    const fs::path dir = fs::temp_directory_path() / "granvit_config_echo";
    fs::remove_all(dir);
    RunConfig cfg;
    cfg.seed = 31;
    cfg.stage1.steps = 77;
    cfg.echo(dir);

    const RunConfig reloaded = RunConfig::load(dir / "config.echo.json");
    EXPECT_EQ(reloaded.to_json(), cfg.to_json());

    // Echoing the reload is byte-identical.
    const fs::path dir2 = fs::temp_directory_path() / "granvit_config_echo2";
    fs::remove_all(dir2);
    reloaded.echo(dir2);
    EXPECT_EQ(slurp(dir / "config.echo.json"), slurp(dir2 / "config.echo.json"));
}
