#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "granvit/corpus.hpp"
#include "granvit/errors.hpp"
#include "granvit/model.hpp"

namespace granvit {

// ---- trainer configuration ----

struct AdamWConfig {
    double lr = 1e-3;  // toy default; the reference full-scale setting is 1e-5
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    bool decay_all = false;  // when true, layernorm/bias parameters decay too
};

struct StageConfig {
    int stage = 1;
    double lambda = 1.0;  // distillation weight
    double alpha = 0.9;   // EMA teacher momentum
    AdamWConfig adamw;
    long long steps = 300;
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;
    std::map<std::string, double> task_mix;  // empty: stage defaults
    std::size_t roi_sampling = 2;
    bool distill = true;  // stage 1 only; tests use false for the branch-removed run
    bool grad_clip = false;
    double clip_norm = 1.0;
    long long eval_every = 0;  // 0 = no periodic eval snapshots

    std::map<std::string, double> effective_task_mix() const {
        if (!task_mix.empty()) return task_mix;
        if (stage == 1) return {{"GlobalCaption", 1.0}, {"Bbox2Caption", 1.0}};
        return {{"GlobalCaption", 1.0}, {"Caption2Bbox", 1.0}};
    }

    void validate() const {
        if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
        if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
        if (steps < 0 || batch_size == 0) throw ConfigError("bad steps/batch_size");
        if (roi_sampling < 1) throw ConfigError("roi_sampling must be >= 1");
        for (const auto& [task, w] : effective_task_mix()) {
            if (!task_from_name(task)) throw ConfigError("unknown task in task_mix: " + task);
            if (w < 0) throw ConfigError("negative task_mix weight for " + task);
        }
    }
};

// ---- strict JSON helpers ----

namespace cfgio {

inline void require_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& section) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, v] : j.items())
        if (!allowed.count(key))
            throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

}  // namespace cfgio

inline nlohmann::json vlm_config_to_json(const VLMConfig& c) {
    nlohmann::json j;
    j["img_px"] = c.img_px;
    j["patch_px"] = c.patch_px;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["enc_layers"] = c.enc_layers;
    j["dec_layers"] = c.dec_layers;
    j["ffn_mult"] = c.ffn_mult;
    j["vocab"] = c.vocab;
    j["max_seq"] = c.max_seq;
    j["pixel_shuffle_r"] = c.pixel_shuffle_r;
    j["tile_px"] = c.tile_px;
    j["init_std"] = c.init_std;
    return j;
}

inline VLMConfig vlm_config_from_json(const nlohmann::json& j, const std::string& section = "model") {
    cfgio::require_keys(j, {"img_px", "patch_px", "d_model", "n_heads", "enc_layers", "dec_layers",
                            "ffn_mult", "vocab", "max_seq", "pixel_shuffle_r", "tile_px", "init_std"},
                        section);
    VLMConfig c;
    cfgio::read(j, "img_px", c.img_px);
    cfgio::read(j, "patch_px", c.patch_px);
    cfgio::read(j, "d_model", c.d_model);
    cfgio::read(j, "n_heads", c.n_heads);
    cfgio::read(j, "enc_layers", c.enc_layers);
    cfgio::read(j, "dec_layers", c.dec_layers);
    cfgio::read(j, "ffn_mult", c.ffn_mult);
    cfgio::read(j, "vocab", c.vocab);
    cfgio::read(j, "max_seq", c.max_seq);
    cfgio::read(j, "pixel_shuffle_r", c.pixel_shuffle_r);
    cfgio::read(j, "tile_px", c.tile_px);
    cfgio::read(j, "init_std", c.init_std);
    c.validate();
    return c;
}

inline nlohmann::json stage_config_to_json(const StageConfig& c) {
    nlohmann::json j;
    j["stage"] = c.stage;
    j["lambda"] = c.lambda;
    j["alpha"] = c.alpha;
    j["lr"] = c.adamw.lr;
    j["beta1"] = c.adamw.beta1;
    j["beta2"] = c.adamw.beta2;
    j["eps"] = c.adamw.eps;
    j["weight_decay"] = c.adamw.weight_decay;
    j["decay_all"] = c.adamw.decay_all;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["task_mix"] = c.effective_task_mix();
    j["roi_sampling"] = c.roi_sampling;
    j["distill"] = c.distill;
    j["grad_clip"] = c.grad_clip;
    j["clip_norm"] = c.clip_norm;
    j["eval_every"] = c.eval_every;
    return j;
}

inline StageConfig stage_config_from_json(const nlohmann::json& j, int stage,
                                          const std::string& section) {
    cfgio::require_keys(j, {"stage", "lambda", "alpha", "lr", "beta1", "beta2", "eps", "weight_decay",
                            "decay_all", "steps", "batch_size", "seed", "task_mix", "roi_sampling",
                            "distill", "grad_clip", "clip_norm", "eval_every"},
                        section);
    StageConfig c;
    c.stage = stage;
    cfgio::read(j, "stage", c.stage);
    cfgio::read(j, "lambda", c.lambda);
    cfgio::read(j, "alpha", c.alpha);
    cfgio::read(j, "lr", c.adamw.lr);
    cfgio::read(j, "beta1", c.adamw.beta1);
    cfgio::read(j, "beta2", c.adamw.beta2);
    cfgio::read(j, "eps", c.adamw.eps);
    cfgio::read(j, "weight_decay", c.adamw.weight_decay);
    cfgio::read(j, "decay_all", c.adamw.decay_all);
    cfgio::read(j, "steps", c.steps);
    cfgio::read(j, "batch_size", c.batch_size);
    cfgio::read(j, "seed", c.seed);
    cfgio::read(j, "task_mix", c.task_mix);
    cfgio::read(j, "roi_sampling", c.roi_sampling);
    cfgio::read(j, "distill", c.distill);
    cfgio::read(j, "grad_clip", c.grad_clip);
    cfgio::read(j, "clip_norm", c.clip_norm);
    cfgio::read(j, "eval_every", c.eval_every);
    c.validate();
    return c;
}

inline nlohmann::json curation_config_to_json(const CurationConfig& c) {
    nlohmann::json j;
    j["min_short_side_px"] = c.min_short_side_px;
    j["aspect_ratio_lo"] = c.aspect_ratio_lo;
    j["aspect_ratio_hi"] = c.aspect_ratio_hi;
    j["min_bbox_area_px2"] = c.min_bbox_area_px2;
    j["min_regions"] = c.min_regions;
    j["source_sampling_weights"] = c.source_sampling_weights;
    j["sample_total"] = c.sample_total;
    j["seed"] = c.seed;
    j["shard_lines"] = c.shard_lines;
    return j;
}

inline CurationConfig curation_config_from_json(const nlohmann::json& j,
                                                const std::string& section = "curation") {
    cfgio::require_keys(j, {"min_short_side_px", "aspect_ratio_lo", "aspect_ratio_hi",
                            "min_bbox_area_px2", "min_regions", "source_sampling_weights",
                            "sample_total", "seed", "shard_lines"},
                        section);
    CurationConfig c;
    cfgio::read(j, "min_short_side_px", c.min_short_side_px);
    cfgio::read(j, "aspect_ratio_lo", c.aspect_ratio_lo);
    cfgio::read(j, "aspect_ratio_hi", c.aspect_ratio_hi);
    cfgio::read(j, "min_bbox_area_px2", c.min_bbox_area_px2);
    cfgio::read(j, "min_regions", c.min_regions);
    cfgio::read(j, "source_sampling_weights", c.source_sampling_weights);
    cfgio::read(j, "sample_total", c.sample_total);
    cfgio::read(j, "seed", c.seed);
    cfgio::read(j, "shard_lines", c.shard_lines);
    c.validate();
    return c;
}

// Union of the per-module sections; every field optional with documented
// defaults; unknown keys are a hard error.
struct RunConfig {
    std::uint64_t seed = 0;
    int threads = 0;  // 0 = library default
    CurationConfig curation;
    VLMConfig model;
    StageConfig stage1;
    StageConfig stage2;

    RunConfig() {
        stage1.stage = 1;
        stage2.stage = 2;
        stage2.distill = false;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        cfgio::require_keys(j, {"seed", "threads", "curation", "model", "stage1", "stage2"}, "<root>");
        RunConfig c;
        cfgio::read(j, "seed", c.seed);
        cfgio::read(j, "threads", c.threads);
        if (j.contains("curation")) c.curation = curation_config_from_json(j.at("curation"));
        if (j.contains("model")) c.model = vlm_config_from_json(j.at("model"));
        if (j.contains("stage1")) c.stage1 = stage_config_from_json(j.at("stage1"), 1, "stage1");
        if (j.contains("stage2")) c.stage2 = stage_config_from_json(j.at("stage2"), 2, "stage2");
        if (c.stage2.stage != 2) throw ConfigError("stage2 section must have stage = 2");
        c.stage2.distill = false;  // no distillation term in stage 2
        return c;
    }

    static RunConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("config: cannot open " + path.string());
        nlohmann::json j = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded()) throw ConfigError("config: malformed JSON in " + path.string());
        return from_json(j);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["threads"] = threads;
        j["curation"] = curation_config_to_json(curation);
        j["model"] = vlm_config_to_json(model);
        j["stage1"] = stage_config_to_json(stage1);
        j["stage2"] = stage_config_to_json(stage2);
        return j;
    }

    // Fully-resolved echo; rerunning from it reproduces outputs.
    void echo(const std::filesystem::path& out_dir) const {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        std::ofstream out(out_dir / "config.echo.json", std::ios::binary);
        if (!out) throw IoError("config echo: cannot write under " + out_dir.string());
        out << to_json().dump(2) << "\n";
    }
};

}  // namespace granvit
