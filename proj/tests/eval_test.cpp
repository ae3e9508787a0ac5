#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "granvit/eval.hpp"
#include "granvit/synthetic.hpp"
#include "granvit/trainer.hpp"

using namespace granvit;
namespace fs = std::filesystem;

namespace {

VLMConfig tiny_cfg() {
    VLMConfig cfg;
    cfg.img_px = 16;
    cfg.patch_px = 4;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.ffn_mult = 2;
    cfg.max_seq = 176;
    return cfg;
}

struct Fixture {
    fs::path dir;
    std::vector<QASample> samples;

    explicit Fixture(const std::string& name, std::size_t scenes = 5) {
        dir = fs::temp_directory_path() / name;
        fs::remove_all(dir);
        fs::create_directories(dir);
        const auto shards = gen_corpus(scenes, 909, dir);
        curate_corpus(shards, CurationConfig{}, dir / "curated");
        samples = load_qa_shards(expand_glob((dir / "curated" / "qa-*.jsonl").string()));
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST(EvalBbox2Caption, RiggedGenerators) {
    Fixture fx("granvit_eval_b2c");
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);

    const auto echo = eval_bbox2caption_with(
        [](const TrainSample& ts) { return ts.qa.answer; }, store);
    EXPECT_DOUBLE_EQ(echo.value, 1.0);
    EXPECT_EQ(echo.task, "Bbox2Caption");
    EXPECT_GT(echo.sample_count, 0u);

    const auto empty = eval_bbox2caption_with(
        [](const TrainSample&) { return std::string(); }, store);
    EXPECT_DOUBLE_EQ(empty.value, 0.0);
}

TEST(EvalBbox2Caption, HandScoredFixtureMatchesHandMean) {
    Fixture fx("granvit_eval_b2c_hand");
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    // Three behaviors keyed by position: exact echo (f1 = 1), first word
    // only, and garbage. References are "<color> <kind>" (2 tokens), so the
    // first-word case scores P=1, R=1/2, f1 = 2/3.
    std::size_t counter = 0;
    const auto mixed = eval_bbox2caption_with(
        [&counter](const TrainSample& ts) -> std::string {
            const std::size_t mode = counter++ % 3;
            if (mode == 0) return ts.qa.answer;
            if (mode == 1) return ts.qa.answer.substr(0, ts.qa.answer.find(' '));
            return "zzz qqq";
        },
        store);
    const std::size_t n = mixed.sample_count;
    double expect = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t mode = i % 3;
        expect += (mode == 0) ? 1.0 : (mode == 1) ? (2.0 * 1.0 * 0.5 / 1.5) : 0.0;
    }
    expect /= static_cast<double>(n);
    EXPECT_NEAR(mixed.value, expect, 1e-12);
}

TEST(EvalCaption2Bbox, RiggedGenerators) {
    Fixture fx("granvit_eval_c2b");
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);

    const auto echo = eval_caption2bbox_with(
        [](const TrainSample& ts) { return ts.qa.answer; }, store);
    EXPECT_DOUBLE_EQ(echo.value, 1.0);
    EXPECT_EQ(echo.parse_failure_count, 0u);

    const auto prose = eval_caption2bbox_with(
        [](const TrainSample&) { return std::string("there is no box in this text"); }, store);
    EXPECT_DOUBLE_EQ(prose.value, 0.0);
    EXPECT_EQ(prose.parse_failure_count, prose.sample_count);

    // Tolerant scoring scans generations for the first bracketed tuple.
    const auto wrapped = eval_caption2bbox_with(
        [](const TrainSample& ts) { return "the region is " + ts.qa.answer + " thanks"; }, store);
    EXPECT_DOUBLE_EQ(wrapped.value, 1.0);
}

TEST(EvalCaption2Bbox, MixedFixtureMatchesHandCount) {
    Fixture fx("granvit_eval_c2b_mixed");
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    // Alternate exact box (hit), slightly shifted far box (miss), junk (miss).
    std::size_t counter = 0;
    const auto mixed = eval_caption2bbox_with(
        [&counter](const TrainSample& ts) -> std::string {
            const std::size_t mode = counter++ % 3;
            if (mode == 0) return ts.qa.answer;
            if (mode == 1) return "[0.000, 0.000, 0.001, 0.001]";
            return "no box";
        },
        store);
    const std::size_t n = mixed.sample_count;
    std::size_t hits = 0, failures = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (i % 3 == 0) ++hits;
        if (i % 3 == 2) ++failures;
    }
    EXPECT_DOUBLE_EQ(mixed.value, static_cast<double>(hits) / static_cast<double>(n));
    EXPECT_EQ(mixed.parse_failure_count, failures);
}

TEST(EvalCaption2Bbox, CorruptionNeverIncreasesAccuracy) {
    Fixture fx("granvit_eval_mono");
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    std::size_t counter = 0;
    auto gen_some = [&counter](const TrainSample& ts) -> std::string {
        return (counter++ % 2 == 0) ? ts.qa.answer : "junk";
    };
    const auto base = eval_caption2bbox_with(gen_some, store);
    for (std::size_t corrupt_at = 0; corrupt_at < 4; ++corrupt_at) {
        std::size_t c2 = 0;
        const auto corrupted = eval_caption2bbox_with(
            [&c2, corrupt_at](const TrainSample& ts) -> std::string {
                const std::size_t i = c2++;
                if (i == corrupt_at * 2) return "@@unparseable@@";  // was a hit
                return (i % 2 == 0) ? ts.qa.answer : "junk";
            },
            store);
        EXPECT_LE(corrupted.value, base.value);
    }
}

TEST(EvalModelPath, RunsEndToEndAndLeavesParametersUntouched) {
    Fixture fx("granvit_eval_model");
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    const ToyVLM model(tiny_cfg(), 21);
    const std::uint64_t before = model.params().checksum();
    const auto b2c = eval_bbox2caption(model, store, 24);
    const auto c2b = eval_caption2bbox(model, store, 0.5, 24);
    EXPECT_EQ(model.params().checksum(), before);
    EXPECT_GE(b2c.value, 0.0);
    EXPECT_LE(b2c.value, 1.0);
    EXPECT_GE(c2b.value, 0.0);
    EXPECT_LE(c2b.value, 1.0);
    EXPECT_LE(c2b.parse_failure_count, c2b.sample_count);
}

TEST(EvalErrors, EmptySetThrows) {
    Fixture fx("granvit_eval_empty");
    std::vector<QASample> only_global;
    for (const QASample& s : fx.samples)
        if (s.task == Task::GlobalCaption) only_global.push_back(s);
    SampleStore store(only_global, fx.dir, tiny_cfg().img_px);
    EXPECT_THROW(eval_bbox2caption_with([](const TrainSample&) { return ""; }, store), EmptySetError);
    EXPECT_THROW(eval_caption2bbox_with([](const TrainSample&) { return ""; }, store), EmptySetError);
}

TEST(EmitReport, RoundTripAndDeterminism) {
    const fs::path dir = fs::temp_directory_path() / "granvit_report";
    fs::remove_all(dir);
    fs::create_directories(dir);

    EvalReport report;
    report.tasks.push_back({"Bbox2Caption", "rouge_l_f1", 0.5123456789, 64, 0});
    report.tasks.push_back({"Caption2Bbox", "acc_at_iou0.5", 1.0 / 3.0, 64, 12});
    report.curve = {{0, 0.1}, {50, 0.25}, {100, 0.333333}};

    emit_report(report, dir / "r.json", dir / "r.csv");
    emit_report(report, dir / "r2.json");
    EXPECT_EQ(slurp(dir / "r.json"), slurp(dir / "r2.json"));

    const nlohmann::json j = nlohmann::json::parse(slurp(dir / "r.json"));
    ASSERT_EQ(j.at("tasks").size(), 2u);
    EXPECT_DOUBLE_EQ(j.at("tasks")[0].at("value").get<double>(), 0.512346);  // 6 decimals
    EXPECT_EQ(j.at("tasks")[1].at("parse_failure_count").get<int>(), 12);
    ASSERT_TRUE(j.contains("curve"));
    EXPECT_EQ(j.at("curve").size(), 3u);

    const std::string csv = slurp(dir / "r.csv");
    EXPECT_NE(csv.find("step,value"), std::string::npos);
    EXPECT_NE(csv.find("50,0.250000"), std::string::npos);

    // Empty curve is omitted.
    EvalReport no_curve;
    no_curve.tasks.push_back({"Bbox2Caption", "rouge_l_f1", 0.25, 4, 0});
    emit_report(no_curve, dir / "nc.json");
    const nlohmann::json j2 = nlohmann::json::parse(slurp(dir / "nc.json"));
    EXPECT_FALSE(j2.contains("curve"));
}
