// granvit: corpus synthesis, curation, two-stage training, evaluation,
// gradient checking, and report emission for the toy fine-grained
// vision-language pipeline.
//
// Exit codes: 0 ok, 1 check/runtime failure, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "granvit/checkpoint.hpp"
#include "granvit/config.hpp"
#include "granvit/corpus.hpp"
#include "granvit/eval.hpp"
#include "granvit/gradcheck_suite.hpp"
#include "granvit/synthetic.hpp"
#include "granvit/trainer.hpp"

namespace fs = std::filesystem;
using namespace granvit;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int threads = 0;
};

RunConfig resolve_config(const GlobalArgs& g) {
    RunConfig cfg = g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
    if (g.seed) {  // flag > file > default; the global seed threads everywhere
        cfg.seed = *g.seed;
        cfg.curation.seed = *g.seed;
        cfg.stage1.seed = *g.seed;
        cfg.stage2.seed = *g.seed;
    }
    if (g.threads > 0) cfg.threads = g.threads;
#ifdef _OPENMP
    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
    return cfg;
}

std::vector<fs::path> resolve_shards(const std::string& spec, const char* default_glob) {
    fs::path p(spec);
    std::error_code ec;
    if (fs::is_directory(p, ec)) return expand_glob((p / default_glob).string());
    return expand_glob(spec);
}

int run_synth(const GlobalArgs& g, std::size_t n, const std::string& out_dir) {
    RunConfig cfg = resolve_config(g);
    gen_corpus(n, cfg.seed, out_dir);
    cfg.echo(out_dir);
    std::printf("synth: wrote %zu records under %s\n", n, out_dir.c_str());
    return 0;
}

int run_curate(const GlobalArgs& g, const std::string& in_glob, const std::string& out_dir) {
    RunConfig cfg = resolve_config(g);
    const auto shards = resolve_shards(in_glob, "records-*.jsonl");
    if (shards.empty()) throw IoError("curate: no input shards match " + in_glob);
    const CurationStats st = curate_corpus(shards, cfg.curation, out_dir);
    cfg.echo(out_dir);
    std::printf("curate: %llu/%llu records accepted, %llu/%llu regions accepted\n",
                static_cast<unsigned long long>(st.records_accepted),
                static_cast<unsigned long long>(st.records_in),
                static_cast<unsigned long long>(st.regions_accepted),
                static_cast<unsigned long long>(st.regions_in));
    for (const auto& [task, n] : st.qa_samples_emitted_by_task)
        std::printf("curate: emitted %llu %s samples\n", static_cast<unsigned long long>(n),
                    task.c_str());
    return 0;
}

int run_train(const GlobalArgs& g, int stage, const std::string& corpus,
              const std::string& images_root, const std::string& init, const std::string& out,
              std::optional<long long> steps_override, const std::string& eval_set,
              const std::string& eval_images) {
    RunConfig cfg = resolve_config(g);
    StageConfig stage_cfg = (stage == 1) ? cfg.stage1 : cfg.stage2;
    stage_cfg.stage = stage;
    if (steps_override) stage_cfg.steps = *steps_override;

    std::optional<Checkpoint> ck;
    if (init != "fresh") {
        ck = Checkpoint::load(init);
    } else if (stage == 2) {
        throw ConfigError("train: stage 2 requires a stage-1 checkpoint, not --init fresh");
    }

    const auto shards = resolve_shards(corpus, "qa-*.jsonl");
    if (shards.empty()) throw IoError("train: no qa shards under " + corpus);
    const auto samples = load_qa_shards(shards);
    const fs::path images = images_root.empty() ? fs::path(corpus) : fs::path(images_root);

    // Periodic eval snapshots: stage 1 tracks Bbox2Caption ROUGE-L, stage 2
    // tracks Caption2Bbox ACC@IoU0.5.
    std::function<double(const ToyVLM&)> eval_fn;
    std::shared_ptr<SampleStore> eval_store;
    if (!eval_set.empty() && stage_cfg.eval_every > 0) {
        const auto eval_shards = resolve_shards(eval_set, "qa-*.jsonl");
        if (eval_shards.empty()) throw IoError("train: no qa shards under " + eval_set);
        const fs::path eval_root = eval_images.empty() ? fs::path(eval_set) : fs::path(eval_images);
        eval_store = std::make_shared<SampleStore>(load_qa_shards(eval_shards), eval_root,
                                                   cfg.model.img_px);
        eval_fn = [stage, eval_store](const ToyVLM& m) {
            return stage == 1 ? eval_bbox2caption(m, *eval_store, 16).value
                              : eval_caption2bbox(m, *eval_store, 0.5, 32).value;
        };
    }

    const fs::path out_path(out);
    const auto result = run_stage(stage_cfg, cfg.model, samples, images, ck, out_path, eval_fn);
    if (!result.eval_curve.empty()) {
        EvalReport curve_report;
        curve_report.curve = result.eval_curve;
        emit_report(curve_report, out_path.string() + ".eval.json",
                    fs::path(out_path.string() + ".eval.csv"));
    }
    if (out_path.has_parent_path()) cfg.echo(out_path.parent_path());
    if (!result.trace.empty())
        std::printf("train: stage %d done, l_total %.6f -> %.6f over %zu steps (%zu samples skipped)\n",
                    stage, result.trace.front().loss.l_total, result.trace.back().loss.l_total,
                    result.trace.size(), result.skipped_samples);
    else
        std::printf("train: stage %d done (0 steps)\n", stage);
    return 0;
}

int run_eval(const GlobalArgs& g, const std::string& ckpt, const std::string& set_glob,
             const std::string& images_root, const std::string& task, const std::string& out,
             std::size_t max_new) {
    resolve_config(g);
    const Checkpoint ck = Checkpoint::load(ckpt);
    const ToyVLM model = model_from_checkpoint(ck);
    const auto shards = resolve_shards(set_glob, "qa-*.jsonl");
    if (shards.empty()) throw IoError("eval: no qa shards match " + set_glob);
    SampleStore store(load_qa_shards(shards), images_root, model.cfg().img_px);

    EvalReport report;
    if (task == "b2c")
        report.tasks.push_back(eval_bbox2caption(model, store, max_new));
    else if (task == "c2b")
        report.tasks.push_back(eval_caption2bbox(model, store, 0.5, max_new));
    else
        throw ConfigError("eval: task must be b2c or c2b");
    emit_report(report, out);
    std::printf("eval: %s %s = %.6f over %zu samples (%zu parse failures)\n",
                report.tasks[0].task.c_str(), report.tasks[0].metric.c_str(), report.tasks[0].value,
                report.tasks[0].sample_count, report.tasks[0].parse_failure_count);
    return 0;
}

int run_gradcheck(const GlobalArgs& g) {
    RunConfig cfg = resolve_config(g);
    bool ok = true;
    for (const GradCheckEntry& e : run_primitive_gradchecks(cfg.seed + 12345)) {
        ok = ok && e.pass();
        std::printf("gradcheck: %-16s max_rel_err %.3e (tol %.0e) %s\n", e.name.c_str(),
                    e.max_rel_err, e.tolerance, e.pass() ? "ok" : "FAIL");
    }
    const GradCheckEntry full = run_full_stage1_loss_gradcheck(cfg.seed + 6789, cfg.model);
    ok = ok && full.pass();
    std::printf("gradcheck: %-16s max_rel_err %.3e (tol %.0e) %s\n", full.name.c_str(),
                full.max_rel_err, full.tolerance, full.pass() ? "ok" : "FAIL");
    return ok ? 0 : 1;
}

// Merges stage traces and eval reports into one summary: the toy analogue of
// the stage-wise metric figure.
int run_report(const std::string& s1_trace, const std::string& s2_trace,
               const std::vector<std::string>& eval_paths, const std::string& out) {
    nlohmann::json summary;
    auto trace_summary = [](const std::string& path) {
        nlohmann::json j;
        std::ifstream in(path);
        if (!in) throw IoError("report: cannot open trace " + path);
        std::string line;
        std::getline(in, line);  // header
        std::vector<std::string> rows;
        while (std::getline(in, line))
            if (!line.empty()) rows.push_back(line);
        j["steps"] = rows.size();
        auto parse_row = [](const std::string& row) {
            nlohmann::json r;
            double a = 0, b = 0, c = 0;
            long long s = 0;
            std::sscanf(row.c_str(), "%lld,%lf,%lf,%lf", &s, &a, &b, &c);
            r["step"] = s;
            r["l_caption"] = a;
            r["l_distill"] = b;
            r["l_total"] = c;
            return r;
        };
        if (!rows.empty()) {
            j["first"] = parse_row(rows.front());
            j["last"] = parse_row(rows.back());
        }
        return j;
    };
    if (!s1_trace.empty()) summary["stage1"] = trace_summary(s1_trace);
    if (!s2_trace.empty()) summary["stage2"] = trace_summary(s2_trace);
    auto& evals = summary["evals"] = nlohmann::json::array();
    for (const std::string& path : eval_paths) {
        std::ifstream in(path);
        if (!in) throw IoError("report: cannot open eval report " + path);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw IoError("report: malformed eval report " + path);
        evals.push_back({{"path", path}, {"report", j}});
    }
    std::ofstream o(out, std::ios::binary);
    if (!o) throw IoError("report: cannot write " + out);
    o << summary.dump(2) << "\n";
    std::printf("report: wrote %s\n", out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"granvit: toy fine-grained vision-language pretraining pipeline"};
    app.require_subcommand(1);

    GlobalArgs g;
    std::uint64_t seed_flag = 0;
    app.add_option("--config", g.config_path, "JSON config file (unknown keys are errors)");
    auto* seed_opt = app.add_option("--seed", seed_flag, "global seed (threads into every component)");
    app.add_option("--threads", g.threads, "worker threads (0 = library default)");

    auto* synth = app.add_subcommand("synth", "generate a deterministic synthetic corpus");
    std::size_t synth_n = 512;
    std::string synth_out;
    synth->add_option("--n", synth_n, "number of scenes")->required();
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* curate = app.add_subcommand("curate", "filter, reformat and shard a record corpus");
    std::string curate_in, curate_out;
    curate->add_option("--in", curate_in, "input shard glob or directory")->required();
    curate->add_option("--out", curate_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "run one training stage");
    int train_stage = 1;
    std::string train_corpus, train_images, train_init = "fresh", train_out;
    std::string train_eval_set, train_eval_images;
    long long train_steps = -1;
    train->add_option("--stage", train_stage, "1 or 2")->required()->check(CLI::Range(1, 2));
    train->add_option("--corpus", train_corpus, "curated qa shard directory or glob")->required();
    train->add_option("--images-root", train_images, "directory image refs resolve against");
    train->add_option("--init", train_init, "checkpoint path or 'fresh'");
    train->add_option("--out", train_out, "output checkpoint path")->required();
    train->add_option("--steps", train_steps, "override configured step count");
    train->add_option("--eval-set", train_eval_set, "held-out qa shards for periodic snapshots");
    train->add_option("--eval-images-root", train_eval_images, "image root for --eval-set");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a QA shard");
    std::string eval_ckpt, eval_set, eval_images, eval_task, eval_out = "report.json";
    std::size_t eval_max_new = 48;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--set", eval_set, "qa shard glob or directory")->required();
    eval_cmd->add_option("--images-root", eval_images, "directory image refs resolve against")
        ->required();
    eval_cmd->add_option("--task", eval_task, "b2c or c2b")->required();
    eval_cmd->add_option("--out", eval_out, "report path");
    eval_cmd->add_option("--max-new", eval_max_new, "generation budget per sample");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every primitive");

    auto* report = app.add_subcommand("report", "merge traces and eval reports into a summary");
    std::string rep_s1, rep_s2, rep_out = "summary.json";
    std::vector<std::string> rep_evals;
    report->add_option("--stage1-trace", rep_s1, "stage 1 trace csv");
    report->add_option("--stage2-trace", rep_s2, "stage 2 trace csv");
    report->add_option("--eval", rep_evals, "eval report json (repeatable)");
    report->add_option("--out", rep_out, "summary path");

    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    if (seed_opt->count() > 0) g.seed = seed_flag;

    try {
        if (synth->parsed()) return run_synth(g, synth_n, synth_out);
        if (curate->parsed()) return run_curate(g, curate_in, curate_out);
        if (train->parsed())
            return run_train(g, train_stage, train_corpus, train_images, train_init, train_out,
                             train_steps >= 0 ? std::optional<long long>(train_steps) : std::nullopt,
                             train_eval_set, train_eval_images);
        if (eval_cmd->parsed())
            return run_eval(g, eval_ckpt, eval_set, eval_images, eval_task, eval_out, eval_max_new);
        if (gradcheck->parsed()) return run_gradcheck(g);
        if (report->parsed()) return run_report(rep_s1, rep_s2, rep_evals, rep_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
