#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "granvit/checkpoint.hpp"
#include "granvit/synthetic.hpp"
#include "granvit/trainer.hpp"
#include "test_util.hpp"

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

StageConfig tiny_stage(int stage) {
    StageConfig cfg;
    cfg.stage = stage;
    cfg.batch_size = 2;
    cfg.steps = 3;
    cfg.seed = 11;
    cfg.distill = (stage == 1);
    return cfg;
}

struct Fixture {
    fs::path dir;
    std::vector<QASample> samples;

    explicit Fixture(const std::string& name, std::size_t scenes = 6) {
        dir = fs::temp_directory_path() / name;
        fs::remove_all(dir);
        fs::create_directories(dir);
        const auto shards = gen_corpus(scenes, 2024, dir);
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

TEST(EmaUpdate, SpecExamples) {
    ParameterSet teacher, student;
    teacher.add("encoder.w", Tensor::full({3}, 1.0));
    student.add("encoder.w", Tensor::full({3}, 0.0));
    ema_update(teacher, student, 0.9);
    for (double v : teacher.tensor("encoder.w").data()) EXPECT_DOUBLE_EQ(v, 0.9);

    ParameterSet same_t, same_s;
    same_t.add("encoder.w", Tensor::full({3}, 0.7));
    same_s.add("encoder.w", Tensor::full({3}, 0.7));
    ema_update(same_t, same_s, 0.9);
    for (double v : same_t.tensor("encoder.w").data()) EXPECT_DOUBLE_EQ(v, 0.7);

    ParameterSet bad;
    bad.add("encoder.w", Tensor::full({2}, 1.0));
    EXPECT_THROW(ema_update(bad, student, 0.9), ShapeMismatchError);
}

TEST(EmaUpdate, ClosedFormUnderConstantStudent) {
    const double alpha = 0.9, theta0 = 1.25, stu = -0.5;
    ParameterSet teacher, student;
    teacher.add("encoder.w", Tensor::full({4}, theta0));
    student.add("encoder.w", Tensor::full({4}, stu));
    const int k = 20;
    for (int i = 0; i < k; ++i) ema_update(teacher, student, alpha);
    const double expect = std::pow(alpha, k) * theta0 + (1.0 - std::pow(alpha, k)) * stu;
    for (double v : teacher.tensor("encoder.w").data()) EXPECT_NEAR(v, expect, 1e-12);
}

TEST(DistillLoss, TeacherEqualsStudentFullBoxIsZero) {
    // teacher = student, bbox = full image, G = grid side, s = 1:
    // crop_resize is the identity, roi_align is the identity, encoders agree.
    const VLMConfig cfg = tiny_cfg();
    ToyVLM model(cfg, 7);
    const SceneRecord sr = gen_scene(5, "s");
    const Tensor canvas = resize_pad(sr.image, cfg.img_px).image;
    ParameterSet teacher = Trainer::clone_encoder(model.params());

    Tape tape(false);
    Tensor grid = model.encode(tape, canvas);
    Tensor loss = distill_loss(tape, model, teacher, canvas, NormBBox{0, 0, 1, 1}, grid,
                               /*roi_sampling=*/1);
    EXPECT_NEAR(loss.item(), 0.0, 1e-10);
}

TEST(DistillLoss, ZeroTeacherConstantGridGivesCSquared) {
    const VLMConfig cfg = tiny_cfg();
    ToyVLM model(cfg, 7);
    ParameterSet teacher = Trainer::clone_encoder(model.params());
    for (auto& [name, p] : teacher.entries())
        for (double& v : p.tensor.mutable_data()) v = 0.0;

    const double c = 0.75;
    const std::size_t g = cfg.grid_side();
    Tensor grid = Tensor::full({g, g, cfg.d_model}, c);
    Tensor canvas = Tensor::full({cfg.img_px, cfg.img_px, 3}, 0.3);
    Tape tape(false);
    Tensor loss = distill_loss(tape, model, teacher, canvas, NormBBox{0.25, 0.25, 0.75, 0.75}, grid, 2);
    EXPECT_NEAR(loss.item(), c * c, 1e-12);
}

TEST(DistillLoss, GradientWrtStudentGridMatchesFiniteDifferences) {
    const VLMConfig cfg = tiny_cfg();
    ToyVLM model(cfg, 7);
    ParameterSet teacher = Trainer::clone_encoder(model.params());
    const SceneRecord sr = gen_scene(6, "s");
    const Tensor canvas = resize_pad(sr.image, cfg.img_px).image;
    const std::size_t g = cfg.grid_side();
    Rng rng(3);
    Tensor grid = Tensor::randn({g, g, cfg.d_model}, rng);
    const NormBBox box{0.125, 0.25, 0.75, 0.875};

    const double err = grad_check_subset(
        [&](Tape& t, const Tensor& x) {
            return distill_loss(t, model, teacher, canvas, box, x, 2);
        },
        grid, testutil::spread_coords(grid.size(), 24));
    EXPECT_LT(err, 1e-5);
}

TEST(StageLoss, AllGlobalBatchHasNoDistillTerm) {
    Fixture fx("granvit_trainer_global");
    ToyVLM model(tiny_cfg(), 3);
    Trainer trainer(std::move(model), tiny_stage(1));
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);

    std::vector<std::size_t> batch;
    for (std::size_t i : store.indices_for(Task::GlobalCaption)) {
        batch.push_back(i);
        if (batch.size() == 2) break;
    }
    ASSERT_EQ(batch.size(), 2u);
    const LossBreakdown loss = trainer.step(store, batch);
    EXPECT_EQ(loss.n_distill, 0u);
    EXPECT_DOUBLE_EQ(loss.l_distill, 0.0);
    EXPECT_DOUBLE_EQ(loss.l_total, loss.l_caption);
}

TEST(StageLoss, LambdaZeroReducesToCaptionLoss) {
    Fixture fx("granvit_trainer_lambda0");
    StageConfig cfg = tiny_stage(1);
    cfg.lambda = 0.0;
    ToyVLM model(tiny_cfg(), 3);
    Trainer trainer(std::move(model), cfg);
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    std::vector<std::size_t> batch{store.indices_for(Task::Bbox2Caption).at(0),
                                   store.indices_for(Task::GlobalCaption).at(0)};
    const LossBreakdown loss = trainer.step(store, batch);
    EXPECT_GT(loss.n_distill, 0u);  // branch still evaluated
    EXPECT_DOUBLE_EQ(loss.l_total, loss.l_caption);
}

TEST(StageLoss, SingleBoxedSampleMatchesHandSum) {
    Fixture fx("granvit_trainer_handsum");
    const VLMConfig vcfg = tiny_cfg();
    StageConfig cfg = tiny_stage(1);
    ToyVLM model(vcfg, 3);
    ToyVLM probe(vcfg, 3);  // identical twin for the independent computation
    Trainer trainer(std::move(model), cfg);
    SampleStore store(fx.samples, fx.dir, vcfg.img_px);
    const std::size_t idx = store.indices_for(Task::Bbox2Caption).at(0);
    const TrainSample& ts = store.at(idx);

    // Hand-sum the two terms through the twin.
    ParameterSet teacher = Trainer::clone_encoder(probe.params());
    Tape tape(false);
    Tensor grid = probe.encode(tape, ts.image);
    Tensor vis = probe.project(tape, grid);
    const TokenSequence seq = probe.build_sequence(ts.qa.question, ts.qa.answer);
    const double cap = probe.decode_loss(tape, seq, vis).item();
    const double dist =
        distill_loss(tape, probe, teacher, ts.image, *ts.canvas_bbox, grid, cfg.roi_sampling).item();

    const LossBreakdown loss = trainer.step(store, {idx});
    EXPECT_NEAR(loss.l_caption, cap, 1e-12);
    EXPECT_NEAR(loss.l_distill, dist, 1e-12);
    EXPECT_NEAR(loss.l_total, cap + cfg.lambda * dist, 1e-12);
}

TEST(StageStep, LossDecompositionHoldsEveryStep) {
    Fixture fx("granvit_trainer_decomp");
    StageConfig cfg = tiny_stage(1);
    cfg.steps = 6;
    ToyVLM model(tiny_cfg(), 3);
    Trainer trainer(std::move(model), cfg);
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    Rng rng(cfg.seed);
    for (int s = 0; s < 6; ++s) {
        const LossBreakdown loss = trainer.step(store, trainer.sample_batch(store, rng));
        EXPECT_EQ(loss.l_total - (loss.l_caption + cfg.lambda * loss.l_distill), 0.0);
    }
}

TEST(StageStep, FreezingContracts) {
    Fixture fx("granvit_trainer_freeze");
    const VLMConfig vcfg = tiny_cfg();
    SampleStore store(fx.samples, fx.dir, vcfg.img_px);

    // Stage 1 leaves decoder parameters bitwise unchanged.
    {
        ToyVLM model(vcfg, 3);
        const std::uint64_t dec_before = model.params().checksum("decoder.");
        const std::uint64_t enc_before = model.params().checksum("encoder.");
        Trainer trainer(std::move(model), tiny_stage(1));
        Rng rng(1);
        for (int s = 0; s < 10; ++s) trainer.step(store, trainer.sample_batch(store, rng));
        EXPECT_EQ(trainer.model().params().checksum("decoder."), dec_before);
        EXPECT_NE(trainer.model().params().checksum("encoder."), enc_before);
    }
    // Stage 2 leaves encoder parameters bitwise unchanged.
    {
        ToyVLM model(vcfg, 3);
        const std::uint64_t enc_before = model.params().checksum("encoder.");
        const std::uint64_t dec_before = model.params().checksum("decoder.");
        Trainer trainer(std::move(model), tiny_stage(2));
        Rng rng(1);
        for (int s = 0; s < 10; ++s) trainer.step(store, trainer.sample_batch(store, rng));
        EXPECT_EQ(trainer.model().params().checksum("encoder."), enc_before);
        EXPECT_NE(trainer.model().params().checksum("decoder."), dec_before);
    }
}

TEST(StageStep, ZeroLearningRateFreezesEverythingAndTeacherStaysFixed) {
    Fixture fx("granvit_trainer_lr0");
    StageConfig cfg = tiny_stage(1);
    cfg.adamw.lr = 0.0;
    ToyVLM model(tiny_cfg(), 3);
    Trainer trainer(std::move(model), cfg);
    const std::uint64_t params_before = trainer.model().params().checksum();
    const ParameterSet teacher_before = trainer.teacher().clone();
    SampleStore store(fx.samples, fx.dir, tiny_cfg().img_px);
    Rng rng(1);
    for (int s = 0; s < 4; ++s) trainer.step(store, trainer.sample_batch(store, rng));
    EXPECT_EQ(trainer.model().params().checksum(), params_before);
    // The teacher EMA-drifts toward the unchanged student: it stays at its
    // fixpoint up to blend rounding.
    for (const auto& [name, p] : trainer.teacher().entries()) {
        const auto& before = teacher_before.tensor(name).data();
        for (std::size_t i = 0; i < before.size(); ++i)
            ASSERT_NEAR(p.tensor.data()[i], before[i], 1e-12);
    }
}

TEST(StageStep, LambdaZeroMatchesDistillBranchRemovedRun) {
    Fixture fx("granvit_trainer_branch");
    const VLMConfig vcfg = tiny_cfg();
    SampleStore store(fx.samples, fx.dir, vcfg.img_px);

    StageConfig with_branch = tiny_stage(1);
    with_branch.lambda = 0.0;
    with_branch.distill = true;
    StageConfig no_branch = tiny_stage(1);
    no_branch.lambda = 0.0;
    no_branch.distill = false;

    Trainer a(ToyVLM(vcfg, 3), with_branch);
    Trainer b(ToyVLM(vcfg, 3), no_branch);
    Rng rng_a(9), rng_b(9);
    for (int s = 0; s < 3; ++s) {
        a.step(store, a.sample_batch(store, rng_a));
        b.step(store, b.sample_batch(store, rng_b));
    }
    for (const auto& [name, p] : a.model().params().entries()) {
        const auto& pa = p.tensor.data();
        const auto& pb = b.model().params().tensor(name).data();
        for (std::size_t i = 0; i < pa.size(); ++i) ASSERT_NEAR(pa[i], pb[i], 1e-12);
    }
}

TEST(StageStep, TeacherPerturbationOnlyMovesDistill) {
    Fixture fx("granvit_trainer_teacher");
    const VLMConfig vcfg = tiny_cfg();
    SampleStore store(fx.samples, fx.dir, vcfg.img_px);
    const std::size_t idx = store.indices_for(Task::Bbox2Caption).at(0);
    const TrainSample& ts = store.at(idx);

    ToyVLM model(vcfg, 3);
    ParameterSet teacher = Trainer::clone_encoder(model.params());
    auto losses = [&](const ParameterSet& tea) {
        Tape tape(false);
        Tensor grid = model.encode(tape, ts.image);
        Tensor vis = model.project(tape, grid);
        const TokenSequence seq = model.build_sequence(ts.qa.question, ts.qa.answer);
        const double cap = model.decode_loss(tape, seq, vis).item();
        const double dist = distill_loss(tape, model, tea, ts.image, *ts.canvas_bbox, grid, 2).item();
        return std::make_pair(cap, dist);
    };
    const auto [cap0, dist0] = losses(teacher);
    teacher.param("encoder.patch_embed.weight").tensor.mutable_data()[0] += 0.5;
    const auto [cap1, dist1] = losses(teacher);
    EXPECT_DOUBLE_EQ(cap0, cap1);
    EXPECT_NE(dist0, dist1);
}

TEST(Checkpoint, ByteExactRoundTrip) {
    const fs::path dir = fs::temp_directory_path() / "granvit_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);

    ToyVLM model(tiny_cfg(), 3);
    Trainer trainer(std::move(model), tiny_stage(1));
    const Checkpoint ck = trainer.make_checkpoint(tiny_cfg());
    ck.save(dir / "a.ckpt");
    const Checkpoint loaded = Checkpoint::load(dir / "a.ckpt");
    loaded.save(dir / "b.ckpt");
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
    EXPECT_FALSE(slurp(dir / "a.ckpt").empty());

    for (const auto& [name, t] : ck.tensors) {
        const auto it = loaded.tensors.find(name);
        ASSERT_NE(it, loaded.tensors.end());
        EXPECT_EQ(it->second.data(), t.data());
    }
}

TEST(RunStage, ZeroStepsReturnsInitAndTracesAreReproducible) {
    Fixture fx("granvit_runstage");
    const VLMConfig vcfg = tiny_cfg();

    // steps = 0: checkpoint equals the (fresh) init.
    StageConfig cfg0 = tiny_stage(1);
    cfg0.steps = 0;
    const auto r0 = run_stage(cfg0, vcfg, fx.samples, fx.dir, std::nullopt, fx.dir / "s0.ckpt");
    const ToyVLM fresh(vcfg, cfg0.seed);
    const ToyVLM reloaded = model_from_checkpoint(Checkpoint::load(r0.checkpoint_path));
    EXPECT_EQ(fresh.params().checksum(), reloaded.params().checksum());

    // Same seed twice: identical traces, byte for byte.
    StageConfig cfg = tiny_stage(1);
    cfg.steps = 4;
    run_stage(cfg, vcfg, fx.samples, fx.dir, std::nullopt, fx.dir / "a.ckpt");
    run_stage(cfg, vcfg, fx.samples, fx.dir, std::nullopt, fx.dir / "b.ckpt");
    EXPECT_EQ(slurp(fx.dir / "a.ckpt.trace.csv"), slurp(fx.dir / "b.ckpt.trace.csv"));
    EXPECT_EQ(slurp(fx.dir / "a.ckpt"), slurp(fx.dir / "b.ckpt"));

    // Stage 2 init from the stage-1 checkpoint keeps the encoder bitwise.
    const Checkpoint stage1 = Checkpoint::load(fx.dir / "a.ckpt");
    StageConfig cfg2 = tiny_stage(2);
    cfg2.steps = 3;
    run_stage(cfg2, vcfg, fx.samples, fx.dir, stage1, fx.dir / "s2.ckpt");
    const ToyVLM after = model_from_checkpoint(Checkpoint::load(fx.dir / "s2.ckpt"));
    const ToyVLM before = model_from_checkpoint(stage1);
    EXPECT_EQ(after.params().checksum("encoder."), before.params().checksum("encoder."));
    EXPECT_NE(after.params().checksum("decoder."), before.params().checksum("decoder."));
}
