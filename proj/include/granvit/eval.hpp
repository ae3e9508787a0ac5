#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "granvit/bbox.hpp"
#include "granvit/bbox_text.hpp"
#include "granvit/errors.hpp"
#include "granvit/model.hpp"
#include "granvit/rouge.hpp"
#include "granvit/tape.hpp"
#include "granvit/trainer.hpp"

namespace granvit {

struct EvalTaskResult {
    std::string task;
    std::string metric;
    double value = 0.0;
    std::size_t sample_count = 0;
    std::size_t parse_failure_count = 0;
};

struct EvalReport {
    std::vector<EvalTaskResult> tasks;
    std::vector<std::pair<long long, double>> curve;  // optional (step, value)
};

namespace detail_eval {

inline std::vector<const TrainSample*> task_samples(const SampleStore& store, Task task) {
    std::vector<const TrainSample*> out;
    for (std::size_t i : store.indices_for(task)) out.push_back(&store.at(i));
    // Aggregation order fixed by sample_id (store is already sorted; keep
    // the contract explicit).
    std::sort(out.begin(), out.end(), [](const TrainSample* a, const TrainSample* b) {
        return a->qa.sample_id < b->qa.sample_id;
    });
    return out;
}

inline Tensor visual_of(const ToyVLM& model, const TrainSample& ts) {
    Tape tape(false);
    return model.encode_project(tape, ts.image);
}

}  // namespace detail_eval

// Mean ROUGE-L F1 of generations against reference captions. The generator
// is injectable so rigged decoders can exercise the aggregation directly.
template <typename GenFn>
EvalTaskResult eval_bbox2caption_with(GenFn&& generate, const SampleStore& eval_set) {
    const auto samples = detail_eval::task_samples(eval_set, Task::Bbox2Caption);
    if (samples.empty()) throw EmptySetError("eval_bbox2caption: no Bbox2Caption samples");
    double sum = 0.0;
    for (const TrainSample* ts : samples) sum += rouge_l(generate(*ts), ts->qa.answer).f1;
    EvalTaskResult r;
    r.task = task_name(Task::Bbox2Caption);
    r.metric = "rouge_l_f1";
    r.sample_count = samples.size();
    r.value = sum / static_cast<double>(samples.size());
    return r;
}

inline EvalTaskResult eval_bbox2caption(const ToyVLM& model, const SampleStore& eval_set,
                                        std::size_t max_new = 48) {
    return eval_bbox2caption_with(
        [&](const TrainSample& ts) {
            return model.generate_greedy(detail_eval::visual_of(model, ts), ts.qa.question, max_new);
        },
        eval_set);
}

// ACC@IoU(tau) of parsed generations against ground-truth boxes; unparseable
// generations count as misses.
template <typename GenFn>
EvalTaskResult eval_caption2bbox_with(GenFn&& generate, const SampleStore& eval_set,
                                      double tau = 0.5) {
    const auto samples = detail_eval::task_samples(eval_set, Task::Caption2Bbox);
    if (samples.empty()) throw EmptySetError("eval_caption2bbox: no Caption2Bbox samples");
    std::vector<std::optional<NormBBox>> preds;
    std::vector<NormBBox> gts;
    std::size_t failures = 0;
    for (const TrainSample* ts : samples) {
        const auto box = scan_bbox_text(generate(*ts));
        failures += !box.has_value();
        preds.push_back(box);
        gts.push_back(*ts->qa.bbox);
    }
    EvalTaskResult r;
    r.task = task_name(Task::Caption2Bbox);
    r.metric = "acc_at_iou0.5";
    r.sample_count = samples.size();
    r.parse_failure_count = failures;
    r.value = acc_at_iou(preds, gts, tau);
    return r;
}

inline EvalTaskResult eval_caption2bbox(const ToyVLM& model, const SampleStore& eval_set,
                                        double tau = 0.5, std::size_t max_new = 48) {
    return eval_caption2bbox_with(
        [&](const TrainSample& ts) {
            return model.generate_greedy(detail_eval::visual_of(model, ts), ts.qa.question, max_new);
        },
        eval_set, tau);
}

// Byte-deterministic JSON (6-decimal values); the curve is omitted when
// empty and additionally written as CSV when a path is given.
inline void emit_report(const EvalReport& report, const std::filesystem::path& json_path,
                        const std::optional<std::filesystem::path>& curve_csv = std::nullopt) {
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw IoError("emit_report: cannot write " + json_path.string());
    char buf[160];
    out << "{\n  \"tasks\": [";
    for (std::size_t i = 0; i < report.tasks.size(); ++i) {
        const EvalTaskResult& t = report.tasks[i];
        std::snprintf(buf, sizeof(buf),
                      "%s\n    {\"task\": \"%s\", \"metric\": \"%s\", \"value\": %.6f, "
                      "\"sample_count\": %zu, \"parse_failure_count\": %zu}",
                      i ? "," : "", t.task.c_str(), t.metric.c_str(), t.value, t.sample_count,
                      t.parse_failure_count);
        out << buf;
    }
    out << "\n  ]";
    if (!report.curve.empty()) {
        out << ",\n  \"curve\": [";
        for (std::size_t i = 0; i < report.curve.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%s[%lld, %.6f]", i ? ", " : "", report.curve[i].first,
                          report.curve[i].second);
            out << buf;
        }
        out << "]";
    }
    out << "\n}\n";
    if (!out) throw IoError("emit_report: short write to " + json_path.string());

    if (curve_csv && !report.curve.empty()) {
        std::ofstream csv(*curve_csv, std::ios::binary);
        if (!csv) throw IoError("emit_report: cannot write " + curve_csv->string());
        csv << "step,value\n";
        for (const auto& [step, value] : report.curve) {
            std::snprintf(buf, sizeof(buf), "%lld,%.6f\n", step, value);
            csv << buf;
        }
    }
}

}  // namespace granvit
