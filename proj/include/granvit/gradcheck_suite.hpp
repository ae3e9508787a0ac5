#pragma once

#include <string>
#include <vector>

#include "granvit/config.hpp"
#include "granvit/image.hpp"
#include "granvit/model.hpp"
#include "granvit/rng.hpp"
#include "granvit/synthetic.hpp"
#include "granvit/tape.hpp"
#include "granvit/trainer.hpp"

namespace granvit {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 1e-5;
    bool pass() const { return max_rel_err <= tolerance; }
};

// Finite-difference checks for every differentiable primitive on three
// random shapes each (eps = 1e-5, double precision).
inline std::vector<GradCheckEntry> run_primitive_gradchecks(std::uint64_t seed = 12345) {
    Rng rng(seed);
    std::vector<GradCheckEntry> out;
    auto record = [&out](const std::string& name, double err) {
        double& slot = [&]() -> double& {
            for (auto& e : out)
                if (e.name == name) return e.max_rel_err;
            out.push_back({name, 0.0, 1e-5});
            return out.back().max_rel_err;
        }();
        slot = std::max(slot, err);
    };

    const std::vector<Shape> shapes{{3, 5}, {2, 7}, {6, 4}};
    for (const Shape& shape : shapes) {
        Tensor x = Tensor::randn(shape, rng);
        Tensor other = Tensor::randn(shape, rng);
        Tensor suffix = Tensor::randn({shape.back()}, rng);

        record("add", grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.add(v, suffix)); }, x));
        record("subtract", grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.sub(v, other)); }, x));
        record("multiply", grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(v, other)); }, x));
        record("transpose",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.transpose(v), t.transpose(other))); }, x));
        record("reshape",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.reshape(v, {v.size()}), t.reshape(other, {other.size()}))); }, x));
        record("concat",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.concat({v, other}, 0), t.concat({other, other}, 0))); }, x));
        record("slice",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.slice(v, 1, 1, v.dim(1) - 1)); }, x));
        record("mean", grad_check([&](Tape& t, const Tensor& v) { return t.mean(v); }, x));
        record("softmax",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.softmax(v), other)); }, x));
        record("gelu", grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.gelu(v)); }, x));
        record("mse", grad_check([&](Tape& t, const Tensor& v) { return t.mse(v, other); }, x));
    }

    for (int trial = 0; trial < 3; ++trial) {
        const std::size_t d = 4 + trial * 2;
        Tensor m = Tensor::randn({3 + static_cast<std::size_t>(trial), d}, rng);
        Tensor n = Tensor::randn({d, 3}, rng);
        Tensor pick = Tensor::randn({m.dim(0), 3}, rng);
        record("matmul", grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.matmul(v, n), pick)); }, m));
        record("matmul", grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.matmul(m, v), pick)); }, n));

        Tensor x = Tensor::randn({4, d}, rng);
        Tensor gain = Tensor::randn({d}, rng, 0.7);
        Tensor bias = Tensor::randn({d}, rng, 0.7);
        Tensor pick2 = Tensor::randn({4, d}, rng);
        record("layer_norm",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.layer_norm(v, gain, bias), pick2)); }, x));
        record("layer_norm",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.layer_norm(x, v, bias), pick2)); }, gain));

        Tensor table = Tensor::randn({9, d}, rng);
        std::vector<int> ids;
        for (int i = 0; i < 6; ++i) ids.push_back(static_cast<int>(rng.below(9)));
        Tensor pick3 = Tensor::randn({ids.size(), d}, rng);
        record("embedding",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.embedding(v, ids), pick3)); }, table));

        Tensor logits = Tensor::randn({5, 8}, rng, 2.0);
        std::vector<int> targets, mask;
        for (int i = 0; i < 5; ++i) {
            targets.push_back(static_cast<int>(rng.below(8)));
            mask.push_back(i == 2 ? 0 : 1);
        }
        record("cross_entropy",
               grad_check([&](Tape& t, const Tensor& v) { return t.cross_entropy(v, targets, mask); }, logits));

        Tensor grid = Tensor::randn({5, 6, 2 + static_cast<std::size_t>(trial)}, rng);
        std::vector<SamplePoint> pts;
        for (int i = 0; i < 7; ++i) pts.push_back({rng.uniform(-0.5, 6.5), rng.uniform(-0.5, 5.5)});
        Tensor pick4 = Tensor::randn({pts.size(), grid.dim(2)}, rng);
        record("bilinear_sample",
               grad_check([&](Tape& t, const Tensor& v) { return t.mean(t.mul(t.bilinear_sample(v, pts), pick4)); }, grid));
    }
    return out;
}

// Full stage-1 loss (caption + lambda * distill on one Bbox2Caption sample)
// against central finite differences, swept over random coordinates of the
// stage's trainable parameters.
inline GradCheckEntry run_full_stage1_loss_gradcheck(std::uint64_t seed = 6789,
                                                     const VLMConfig& vlm_cfg = VLMConfig{},
                                                     std::size_t n_coords = 20) {
    ToyVLM model(vlm_cfg, seed);
    model.params().set_trainable_by_prefix({"encoder.", "projector."});
    ParameterSet teacher = Trainer::clone_encoder(model.params());
    // Teacher slightly off the student so the distill term is non-degenerate.
    {
        Rng drift(mix_seed(seed, 1));
        for (auto& [name, p] : teacher.entries())
            for (double& v : p.tensor.mutable_data()) v += 0.01 * drift.normal();
    }

    const SceneRecord sr = gen_scene(mix_seed(seed, 2), "gradcheck-scene");
    const Tensor canvas = resize_pad(sr.image, vlm_cfg.img_px).image;
    const RegionAnnotation& region = sr.record.regions.front();
    const NormBBox box = normalize_bbox(region.x1, region.y1, region.x2, region.y2,
                                        sr.record.width_px, sr.record.height_px);
    const NormBBox canvas_box = box;  // square render: canvas == record space
    const std::string question = bbox2caption_question(box);
    const std::string answer = region.caption;
    const double lambda = 1.0;

    auto loss_fn = [&](Tape& tape) {
        Tensor grid = model.encode(tape, canvas);
        Tensor visual = model.project(tape, grid);
        const TokenSequence seq = model.build_sequence(question, answer);
        Tensor caption = model.decode_loss(tape, seq, visual);
        Tensor dist = distill_loss(tape, model, teacher, canvas, canvas_box, grid, 2);
        return tape.add(caption, tape.scale(dist, lambda));
    };

    Tape tape;
    Tensor loss = loss_fn(tape);
    auto grads = backward_params(tape, loss, model.params());

    std::vector<std::string> names;
    for (const auto& [name, p] : model.params().entries())
        if (p.trainable) names.push_back(name);

    Rng rng(mix_seed(seed, 3));
    GradCheckEntry entry{"stage1_full_loss", 0.0, 1e-4};
    const double eps = 1e-5;
    for (std::size_t k = 0; k < n_coords; ++k) {
        const std::string& name = names[rng.below(names.size())];
        Tensor& pt = model.params().param(name).tensor;
        const std::size_t coord = rng.below(pt.size());
        const double orig = pt.data()[coord];
        pt.mutable_data()[coord] = orig + eps;
        Tape tp(false);
        const double fp = loss_fn(tp).item();
        pt.mutable_data()[coord] = orig - eps;
        Tape tm(false);
        const double fm = loss_fn(tm).item();
        pt.mutable_data()[coord] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double analytic = grads.at(name).data()[coord];
        const double rel =
            std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    return entry;
}

}  // namespace granvit
