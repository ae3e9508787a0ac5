#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "granvit/checkpoint.hpp"
#include "granvit/config.hpp"
#include "granvit/corpus.hpp"
#include "granvit/errors.hpp"
#include "granvit/image.hpp"
#include "granvit/model.hpp"
#include "granvit/roi_align.hpp"
#include "granvit/tape.hpp"

namespace granvit {

// ---- samples with resolved pixels ----

struct TrainSample {
    QASample qa;
    Tensor image;                         // padded training canvas
    std::optional<NormBBox> canvas_bbox;  // qa.bbox re-expressed on the canvas
};

// Loads QA shards and decodes/pads the referenced images once. Samples are
// kept in sample_id order; the deterministic batch schedule indexes into
// per-task lists.
class SampleStore {
public:
    SampleStore(std::vector<QASample> samples, const std::filesystem::path& images_root,
                std::size_t img_px) {
        std::sort(samples.begin(), samples.end(),
                  [](const QASample& a, const QASample& b) { return a.sample_id < b.sample_id; });
        std::map<std::string, std::pair<Tensor, PadAffine>> cache;
        for (QASample& qa : samples) {
            auto it = cache.find(qa.image_ref);
            if (it == cache.end()) {
                const Tensor raw = read_ppm(images_root / qa.image_ref);
                ResizePadResult rp = resize_pad(raw, img_px);
                it = cache.emplace(qa.image_ref, std::make_pair(std::move(rp.image), rp.affine)).first;
                raw_dims_.emplace(qa.image_ref, std::make_pair(raw.dim(1), raw.dim(0)));
            }
            TrainSample ts;
            ts.image = it->second.first;
            if (qa.bbox) {
                const auto [w, h] = raw_dims_.at(qa.image_ref);
                ts.canvas_bbox = map_bbox_to_canvas(it->second.second, *qa.bbox, w, h);
            }
            ts.qa = std::move(qa);
            samples_.push_back(std::move(ts));
        }
        for (std::size_t i = 0; i < samples_.size(); ++i)
            by_task_[samples_[i].qa.task].push_back(i);
    }

    std::size_t size() const { return samples_.size(); }
    const TrainSample& at(std::size_t i) const { return samples_[i]; }
    const std::vector<TrainSample>& all() const { return samples_; }

    const std::vector<std::size_t>& indices_for(Task t) const {
        static const std::vector<std::size_t> kEmpty;
        auto it = by_task_.find(t);
        return it == by_task_.end() ? kEmpty : it->second;
    }

private:
    std::vector<TrainSample> samples_;
    std::map<Task, std::vector<std::size_t>> by_task_;
    std::map<std::string, std::pair<std::size_t, std::size_t>> raw_dims_;  // ref -> (w, h)
};

// ---- losses ----

struct LossBreakdown {
    double l_caption = 0.0;
    double l_distill = 0.0;
    double l_total = 0.0;
    std::size_t n_caption = 0;
    std::size_t n_distill = 0;
};

// L_distill = MSE(teacher(crop(x)), ROIAlign(student_grid)); gradient reaches
// only the student grid (teacher tensors never require grad, pixels are
// constants).
inline Tensor distill_loss(Tape& tape, const ToyVLM& model, const ParameterSet& teacher,
                           const Tensor& canvas_image, const NormBBox& canvas_bbox,
                           const Tensor& student_grid, std::size_t roi_sampling) {
    const auto px = static_cast<double>(model.cfg().img_px);
    Tensor crop = crop_resize(tape, canvas_image, canvas_bbox.x1 * px, canvas_bbox.y1 * px,
                              canvas_bbox.x2 * px, canvas_bbox.y2 * px, model.cfg().img_px);
    Tensor teacher_grid = model.encode_with(tape, teacher, crop);
    Tensor pooled = roi_align(tape, student_grid, canvas_bbox, model.cfg().grid_side(), roi_sampling);
    return tape.mse(teacher_grid, pooled);
}

// theta_tea = alpha * theta_tea + (1 - alpha) * theta_stu, elementwise, for
// every encoder parameter.
inline void ema_update(ParameterSet& teacher, const ParameterSet& student, double alpha) {
    for (auto& [name, tp] : teacher.entries()) {
        const Tensor& sp = student.tensor(name);
        if (sp.shape() != tp.tensor.shape())
            throw ShapeMismatchError("ema_update: shape mismatch for " + name);
        auto& td = tp.tensor.mutable_data();
        const auto& sd = sp.data();
        for (std::size_t i = 0; i < td.size(); ++i) td[i] = alpha * td[i] + (1.0 - alpha) * sd[i];
    }
}

// ---- optimizer ----

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    // Updates trainable parameters only, in name order. Decoupled weight
    // decay; layernorm/bias parameters are exempt unless decay_all.
    void step(ParameterSet& params, const std::map<std::string, Tensor>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& [name, p] : params.entries()) {
            if (!p.trainable) continue;
            const auto git = grads.find(name);
            if (git == grads.end()) continue;
            const auto& g = git->second.data();
            auto& m = moment(m_, name, g.size());
            auto& v = moment(v_, name, g.size());
            auto& w = p.tensor.mutable_data();
            const double wd = (p.decay_exempt && !cfg_.decay_all) ? 0.0 : cfg_.weight_decay;
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * w[i]);
            }
        }
    }

    long long step_count() const { return t_; }

private:
    static std::vector<double>& moment(std::map<std::string, std::vector<double>>& store,
                                       const std::string& name, std::size_t n) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, std::vector<double>(n, 0.0)).first;
        return it->second;
    }

    AdamWConfig cfg_;
    long long t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

// ---- the two-stage trainer ----

struct TraceRow {
    long long step = 0;
    LossBreakdown loss;
};

class Trainer {
public:
    Trainer(ToyVLM model, StageConfig cfg, std::optional<ParameterSet> teacher = std::nullopt)
        : model_(std::move(model)), cfg_(cfg), optimizer_(cfg.adamw) {
        cfg_.validate();
        apply_stage_partition();
        if (teacher)
            teacher_ = std::move(*teacher);
        else
            teacher_ = clone_encoder(model_.params());
        for (auto& [name, p] : teacher_.entries()) {
            p.trainable = false;
            p.tensor.set_requires_grad(false);
        }
    }

    ToyVLM& model() { return model_; }
    const ToyVLM& model() const { return model_; }
    ParameterSet& teacher() { return teacher_; }
    const StageConfig& cfg() const { return cfg_; }
    long long step_count() const { return step_count_; }

    // Deterministic batch: task by mix weight, then uniform index within the
    // task's sample list.
    std::vector<std::size_t> sample_batch(const SampleStore& store, Rng& rng) const {
        const auto mix = cfg_.effective_task_mix();
        std::vector<std::pair<Task, double>> tasks;
        double total = 0.0;
        for (const auto& [name, w] : mix) {
            const auto task = task_from_name(name);
            if (w > 0 && !store.indices_for(*task).empty()) {
                tasks.emplace_back(*task, w);
                total += w;
            }
        }
        if (tasks.empty()) throw EmptyBatchError("sample_batch: no samples for the stage task mix");
        std::vector<std::size_t> batch;
        for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
            const double r = rng.uniform() * total;
            double acc = 0.0;
            Task chosen = tasks.back().first;
            for (const auto& [task, w] : tasks) {
                acc += w;
                if (r < acc) {
                    chosen = task;
                    break;
                }
            }
            const auto& idx = store.indices_for(chosen);
            batch.push_back(idx[rng.below(idx.size())]);
        }
        return batch;
    }

    // One optimizer step: forward/backward per sample on its own tape,
    // gradients summed in parameter-name order, AdamW on the stage's
    // trainables, then (stage 1) the EMA teacher update.
    LossBreakdown step(const SampleStore& store, const std::vector<std::size_t>& batch) {
        if (batch.empty()) throw EmptyBatchError("step: empty batch");
        const std::size_t n = batch.size();
        std::size_t n_distill = 0;
        if (cfg_.stage == 1 && cfg_.distill)
            for (std::size_t i : batch)
                n_distill += (store.at(i).qa.task == Task::Bbox2Caption && store.at(i).canvas_bbox);

        std::map<std::string, std::vector<double>> grad_acc;
        double caption_sum = 0.0, distill_sum = 0.0;
        for (std::size_t i : batch) {
            const TrainSample& ts = store.at(i);
            Tape tape;
            Tensor grid = model_.encode(tape, ts.image);
            Tensor visual = model_.project(tape, grid);
            const TokenSequence seq = model_.build_sequence(ts.qa.question, ts.qa.answer);
            Tensor caption = model_.decode_loss(tape, seq, visual);
            caption_sum += caption.item();
            Tensor weighted = tape.scale(caption, 1.0 / static_cast<double>(n));
            if (cfg_.stage == 1 && cfg_.distill && ts.qa.task == Task::Bbox2Caption && ts.canvas_bbox) {
                Tensor dist = distill_loss(tape, model_, teacher_, ts.image, *ts.canvas_bbox, grid,
                                           cfg_.roi_sampling);
                distill_sum += dist.item();
                weighted = tape.add(weighted,
                                    tape.scale(dist, cfg_.lambda / static_cast<double>(n_distill)));
            }
            auto grads = backward_params(tape, weighted, model_.params());
            for (const auto& [name, g] : grads) {
                auto it = grad_acc.find(name);
                if (it == grad_acc.end())
                    grad_acc.emplace(name, g.data());
                else
                    for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g.data()[k];
            }
        }

        LossBreakdown out;
        out.n_caption = n;
        out.n_distill = n_distill;
        out.l_caption = caption_sum / static_cast<double>(n);
        out.l_distill = n_distill ? distill_sum / static_cast<double>(n_distill) : 0.0;
        out.l_total = out.l_caption + cfg_.lambda * out.l_distill;
        if (!std::isfinite(out.l_total))
            throw NonFiniteError("step: diverged loss at step " + std::to_string(step_count_));

        std::map<std::string, Tensor> grads;
        for (auto& [name, g] : grad_acc)
            grads.emplace(name, Tensor::from_data(model_.params().tensor(name).shape(), std::move(g)));
        if (cfg_.grad_clip) clip_gradients(grads);
        optimizer_.step(model_.params(), grads);
        if (cfg_.stage == 1) ema_update(teacher_, model_.params(), cfg_.alpha);
        ++step_count_;
        return out;
    }

    Checkpoint make_checkpoint(const VLMConfig& vlm) const {
        Checkpoint ck;
        ck.meta["type"] = "granvit_vlm";
        ck.meta["stage"] = cfg_.stage;
        ck.meta["step"] = step_count_;
        ck.meta["vlm"] = vlm_config_to_json(vlm);
        ck.meta["stage_config"] = stage_config_to_json(cfg_);
        for (const auto& [name, p] : model_.params().entries()) ck.tensors.emplace(name, p.tensor.clone(false));
        for (const auto& [name, p] : teacher_.entries())
            ck.tensors.emplace("teacher." + name, p.tensor.clone(false));
        return ck;
    }

    static ParameterSet clone_encoder(const ParameterSet& params) {
        ParameterSet out;
        for (const auto& [name, p] : params.entries())
            if (name.rfind("encoder.", 0) == 0) out.add(name, p.tensor.clone(false));
        return out;
    }

private:
    void apply_stage_partition() {
        if (cfg_.stage == 1)
            model_.params().set_trainable_by_prefix({"encoder.", "projector."});
        else
            model_.params().set_trainable_by_prefix({"projector.", "decoder."});
    }

    void clip_gradients(std::map<std::string, Tensor>& grads) const {
        double sq = 0.0;
        for (const auto& [name, g] : grads)
            for (double v : g.data()) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm <= cfg_.clip_norm) return;
        const double s = cfg_.clip_norm / norm;
        for (auto& [name, g] : grads)
            for (double& v : g.mutable_data()) v *= s;
    }

    ToyVLM model_;
    ParameterSet teacher_;
    StageConfig cfg_;
    AdamW optimizer_;
    long long step_count_ = 0;
};

// ---- stage runner ----

struct RunStageResult {
    std::vector<TraceRow> trace;
    std::size_t skipped_samples = 0;  // corpus samples outside the task mix
    std::filesystem::path checkpoint_path;
    std::vector<std::pair<long long, double>> eval_curve;  // (step, metric)
};

inline void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("trace: cannot write " + path.string());
    out << "step,l_caption,l_distill,l_total\n";
    char buf[128];
    for (const TraceRow& row : trace) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g\n", row.step, row.loss.l_caption,
                      row.loss.l_distill, row.loss.l_total);
        out << buf;
    }
}

// Builds the model (fresh or from a checkpoint), runs the stage's step loop
// on a deterministic schedule, writes the checkpoint and the loss trace.
// When eval_every > 0 and an eval callback is given, the stage metric is
// snapshotted every eval_every steps and once more after the last step.
inline RunStageResult run_stage(const StageConfig& stage_cfg, const VLMConfig& vlm_cfg,
                                const std::vector<QASample>& corpus,
                                const std::filesystem::path& images_root,
                                const std::optional<Checkpoint>& init,
                                const std::filesystem::path& out_ckpt,
                                const std::function<double(const ToyVLM&)>& eval_fn = {}) {
    stage_cfg.validate();
    VLMConfig vlm = vlm_cfg;
    ToyVLM model = [&]() {
        if (!init) return ToyVLM(vlm, stage_cfg.seed);
        vlm = vlm_config_from_json(init->meta.at("vlm"), "checkpoint.vlm");
        ParameterSet params;
        for (const auto& [name, t] : init->tensors)
            if (name.rfind("teacher.", 0) != 0) params.add(name, t.clone(false));
        return ToyVLM(vlm, std::move(params));
    }();
    std::optional<ParameterSet> teacher;
    if (init) {
        ParameterSet t;
        for (const auto& [name, tensor] : init->tensors)
            if (name.rfind("teacher.", 0) == 0) t.add(name.substr(8), tensor.clone(false));
        if (t.count() > 0) teacher = std::move(t);
    }

    // Keep only samples the stage's task mix can draw.
    const auto mix = stage_cfg.effective_task_mix();
    std::vector<QASample> usable;
    std::size_t skipped = 0;
    for (const QASample& s : corpus) {
        const auto it = mix.find(task_name(s.task));
        if (it != mix.end() && it->second > 0)
            usable.push_back(s);
        else
            ++skipped;
    }

    Trainer trainer(std::move(model), stage_cfg, std::move(teacher));
    RunStageResult result;
    result.skipped_samples = skipped;

    if (stage_cfg.steps > 0) {
        SampleStore store(std::move(usable), images_root, vlm.img_px);
        Rng rng(stage_cfg.seed);
        for (long long s = 0; s < stage_cfg.steps; ++s) {
            const auto batch = trainer.sample_batch(store, rng);
            try {
                const LossBreakdown loss = trainer.step(store, batch);
                result.trace.push_back(TraceRow{s, loss});
            } catch (const NonFiniteError&) {
                trainer.make_checkpoint(vlm).save(out_ckpt.string() + ".diverged");
                throw;
            }
            if (eval_fn && stage_cfg.eval_every > 0 &&
                ((s + 1) % stage_cfg.eval_every == 0 || s + 1 == stage_cfg.steps))
                result.eval_curve.emplace_back(s + 1, eval_fn(trainer.model()));
        }
    }

    trainer.make_checkpoint(vlm).save(out_ckpt);
    write_trace_csv(out_ckpt.string() + ".trace.csv", result.trace);
    result.checkpoint_path = out_ckpt;
    return result;
}

// Rebuild a model from a checkpoint (evaluation path).
inline ToyVLM model_from_checkpoint(const Checkpoint& ck) {
    const VLMConfig vlm = vlm_config_from_json(ck.meta.at("vlm"), "checkpoint.vlm");
    ParameterSet params;
    for (const auto& [name, t] : ck.tensors)
        if (name.rfind("teacher.", 0) != 0) params.add(name, t.clone(false));
    return ToyVLM(vlm, std::move(params));
}

}  // namespace granvit
