#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "granvit/bbox.hpp"
#include "granvit/bbox_text.hpp"
#include "granvit/errors.hpp"
#include "granvit/rng.hpp"

namespace granvit {

// ---- record model ----

struct RegionAnnotation {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // absolute pixels
    std::string caption;
};

struct RawRecord {
    std::string record_id;
    std::string source;
    long long width_px = 0;
    long long height_px = 0;
    std::string image_ref;
    std::optional<std::string> global_caption;
    std::vector<RegionAnnotation> regions;
};

enum class Task { GlobalCaption, Bbox2Caption, Caption2Bbox };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::GlobalCaption: return "GlobalCaption";
        case Task::Bbox2Caption: return "Bbox2Caption";
        case Task::Caption2Bbox: return "Caption2Bbox";
    }
    return "?";
}

inline std::optional<Task> task_from_name(std::string_view s) {
    if (s == "GlobalCaption") return Task::GlobalCaption;
    if (s == "Bbox2Caption") return Task::Bbox2Caption;
    if (s == "Caption2Bbox") return Task::Caption2Bbox;
    return std::nullopt;
}

struct QASample {
    std::string sample_id;
    std::string record_id;
    Task task = Task::GlobalCaption;
    std::string question;
    std::string answer;
    std::optional<NormBBox> bbox;  // present iff task != GlobalCaption
    std::string image_ref;
    std::string source;  // carried for balancing; not serialized
};

struct CurationConfig {
    long long min_short_side_px = 448;
    double aspect_ratio_lo = 1.0 / 3.0;
    double aspect_ratio_hi = 3.0;
    double min_bbox_area_px2 = 10000.0;  // 100^2
    long long min_regions = 1;
    std::map<std::string, double> source_sampling_weights;  // empty: every source, unweighted
    std::uint64_t sample_total = 0;                         // 0: balancing off
    std::uint64_t seed = 0;
    std::size_t shard_lines = 10000;

    void validate() const {
        if (aspect_ratio_lo <= 0 || aspect_ratio_hi < aspect_ratio_lo)
            throw ConfigError("curation: aspect ratio range must satisfy 0 < lo <= hi");
        if (min_short_side_px < 0 || min_bbox_area_px2 < 0 || min_regions < 0 || shard_lines == 0)
            throw ConfigError("curation: negative threshold or zero shard size");
    }
};

struct CurationStats {
    std::uint64_t records_in = 0;
    std::uint64_t records_accepted = 0;
    std::uint64_t regions_in = 0;
    std::uint64_t regions_accepted = 0;
    std::map<std::string, std::uint64_t> rejects_by_reason;
    std::map<std::string, std::uint64_t> qa_samples_emitted_by_task;
};

// ---- filters (rejection is a value, not an error) ----

struct FilterResult {
    bool accepted = false;
    std::string reason;  // first failed rule when rejected

    static FilterResult accept() { return {true, ""}; }
    static FilterResult reject(std::string why) { return {false, std::move(why)}; }
};

// min(width, height) must exceed the short-side threshold and width/height
// must lie inside the aspect-ratio range.
inline FilterResult validate_image(const RawRecord& rec, const CurationConfig& cfg) {
    if (std::min(rec.width_px, rec.height_px) <= cfg.min_short_side_px)
        return FilterResult::reject("short_side");
    const double ratio = static_cast<double>(rec.width_px) / static_cast<double>(rec.height_px);
    if (ratio < cfg.aspect_ratio_lo || ratio > cfg.aspect_ratio_hi)
        return FilterResult::reject("aspect_ratio");
    return FilterResult::accept();
}

// In-bounds and ordered, aspect ratio in range, area strictly above 100^2.
inline FilterResult filter_region(const RegionAnnotation& r, long long width_px,
                                  long long height_px, const CurationConfig& cfg) {
    if (!(r.x1 >= 0 && r.x1 < r.x2 && r.x2 <= static_cast<double>(width_px)) ||
        !(r.y1 >= 0 && r.y1 < r.y2 && r.y2 <= static_cast<double>(height_px)))
        return FilterResult::reject("bounds");
    const double ratio = (r.x2 - r.x1) / (r.y2 - r.y1);
    if (ratio < cfg.aspect_ratio_lo || ratio > cfg.aspect_ratio_hi)
        return FilterResult::reject("aspect_ratio");
    if ((r.x2 - r.x1) * (r.y2 - r.y1) <= cfg.min_bbox_area_px2)
        return FilterResult::reject("area");
    return FilterResult::accept();
}

// Absolute -> relative coordinates, 3-decimal quantization.
inline NormBBox normalize_bbox(double x1, double y1, double x2, double y2, long long width_px,
                               long long height_px) {
    if (x2 - x1 <= 0 || y2 - y1 <= 0)
        throw DegenerateBoxError("normalize_bbox: zero-extent box");
    const double w = static_cast<double>(width_px), h = static_cast<double>(height_px);
    return quantize_norm_bbox(x1 / w, y1 / h, x2 / w, y2 / h);
}

// ---- QA templates ----

inline constexpr std::string_view kGlobalCaptionQuestion =
    "Describe in detail what is shown in the image in one paragraph";

inline std::string bbox2caption_question(const NormBBox& b) {
    return "Describe the content contained within the normalized bounding box coordinates " +
           format_bbox_text(b) + " in no more than 10 words.";
}

inline std::string caption2bbox_question(const std::string& caption) {
    return "Please provide the bounding box coordinate of the region this sentence describes: " +
           caption;
}

// Emits the QA samples of one validated record whose regions are already
// filtered: optional global sample, then one Bbox2Caption and one
// Caption2Bbox per region, in region order.
inline std::vector<QASample> reformat(const RawRecord& rec) {
    std::vector<QASample> out;
    auto base = [&rec](Task task) {
        QASample s;
        s.record_id = rec.record_id;
        s.task = task;
        s.image_ref = rec.image_ref;
        s.source = rec.source;
        return s;
    };
    if (rec.global_caption && !rec.global_caption->empty()) {
        QASample s = base(Task::GlobalCaption);
        s.sample_id = rec.record_id + ":global";
        s.question = std::string(kGlobalCaptionQuestion);
        s.answer = *rec.global_caption;
        out.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < rec.regions.size(); ++i) {
        const RegionAnnotation& r = rec.regions[i];
        const NormBBox nb = normalize_bbox(r.x1, r.y1, r.x2, r.y2, rec.width_px, rec.height_px);
        char idx[16];
        std::snprintf(idx, sizeof(idx), "%05zu", i);

        QASample b2c = base(Task::Bbox2Caption);
        b2c.sample_id = rec.record_id + ":b2c:" + idx;
        b2c.question = bbox2caption_question(nb);
        b2c.answer = r.caption;
        b2c.bbox = nb;
        out.push_back(std::move(b2c));

        QASample c2b = base(Task::Caption2Bbox);
        c2b.sample_id = rec.record_id + ":c2b:" + idx;
        c2b.question = caption2bbox_question(r.caption);
        c2b.answer = format_bbox_text(nb);
        c2b.bbox = nb;
        out.push_back(std::move(c2b));
    }
    return out;
}

// ---- balancing ----

// Deterministic weighted interleave. Per-source draw counts are
// round(weight fraction * total) with the remainder assigned to the
// largest-weight source; order within each source is preserved.
inline std::vector<QASample> balance_sample(const std::map<std::string, std::vector<QASample>>& streams,
                                            const std::map<std::string, double>& weights,
                                            std::uint64_t total, std::uint64_t seed) {
    std::vector<std::string> sources;
    double weight_sum = 0.0;
    for (const auto& [src, w] : weights) {
        if (w < 0) throw ConfigError("balance_sample: negative weight for " + src);
        weight_sum += w;
        sources.push_back(src);
    }
    if (weight_sum <= 0) throw ConfigError("balance_sample: all weights zero");

    bool any_input = false;
    for (const auto& [src, stream] : streams) any_input = any_input || !stream.empty();
    if (!any_input && total > 0) throw EmptyInputError("balance_sample: all streams empty");

    // Quotas.
    std::map<std::string, std::uint64_t> quota;
    std::uint64_t assigned = 0;
    std::string largest;
    for (const auto& src : sources) {
        const double w = weights.at(src);
        if (largest.empty() || w > weights.at(largest)) largest = src;
        const auto q = static_cast<std::uint64_t>(
            std::llround(w / weight_sum * static_cast<double>(total)));
        quota[src] = q;
        assigned += q;
    }
    if (assigned < total)
        quota[largest] += total - assigned;
    else if (assigned > total) {
        const std::uint64_t over = assigned - total;
        quota[largest] -= std::min(quota[largest], over);
    }
    // Cap by availability.
    std::map<std::string, std::uint64_t> remaining;
    for (const auto& src : sources) {
        auto it = streams.find(src);
        const std::uint64_t avail = it == streams.end() ? 0 : it->second.size();
        remaining[src] = std::min(quota[src], avail);
    }

    std::vector<QASample> out;
    std::map<std::string, std::size_t> cursor;
    Rng rng(seed);
    while (true) {
        std::uint64_t left = 0;
        for (const auto& src : sources) left += remaining[src];
        if (left == 0) break;
        // Pick a source with probability proportional to its remaining quota.
        const double r = rng.uniform() * static_cast<double>(left);
        double acc = 0.0;
        for (const auto& src : sources) {
            acc += static_cast<double>(remaining[src]);
            if (r < acc && remaining[src] > 0) {
                out.push_back(streams.at(src)[cursor[src]++]);
                --remaining[src];
                break;
            }
        }
    }
    return out;
}

// ---- line format ----

inline nlohmann::json bbox_to_json(const NormBBox& b) {
    return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2});
}

inline std::string record_to_json_line(const RawRecord& rec) {
    nlohmann::json j;
    j["id"] = rec.record_id;
    j["source"] = rec.source;
    j["width"] = rec.width_px;
    j["height"] = rec.height_px;
    j["image"] = rec.image_ref;
    j["caption"] = rec.global_caption ? nlohmann::json(*rec.global_caption) : nlohmann::json(nullptr);
    auto& regions = j["regions"] = nlohmann::json::array();
    for (const RegionAnnotation& r : rec.regions) {
        nlohmann::json rj;
        rj["bbox"] = nlohmann::json::array({r.x1, r.y1, r.x2, r.y2});
        rj["caption"] = r.caption;
        regions.push_back(std::move(rj));
    }
    return j.dump();
}

// Strict schema: keys exactly {id, source, width, height, image, caption,
// regions}; caption may be null. Returns nullopt for malformed lines.
inline std::optional<RawRecord> parse_record_line(const std::string& line) {
    const nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    static const std::set<std::string> kKeys{"id", "source", "width", "height",
                                             "image", "caption", "regions"};
    std::set<std::string> seen;
    for (const auto& [k, v] : j.items()) seen.insert(k);
    if (seen != kKeys) return std::nullopt;
    if (!j["id"].is_string() || !j["source"].is_string() || !j["width"].is_number_integer() ||
        !j["height"].is_number_integer() || !j["image"].is_string() || !j["regions"].is_array())
        return std::nullopt;
    if (!j["caption"].is_null() && !j["caption"].is_string()) return std::nullopt;

    RawRecord rec;
    rec.record_id = j["id"].get<std::string>();
    rec.source = j["source"].get<std::string>();
    rec.width_px = j["width"].get<long long>();
    rec.height_px = j["height"].get<long long>();
    rec.image_ref = j["image"].get<std::string>();
    if (rec.record_id.empty() || rec.width_px < 1 || rec.height_px < 1) return std::nullopt;
    if (j["caption"].is_string()) rec.global_caption = j["caption"].get<std::string>();
    for (const auto& rj : j["regions"]) {
        if (!rj.is_object() || !rj.contains("bbox") || !rj.contains("caption")) return std::nullopt;
        const auto& bb = rj["bbox"];
        if (!bb.is_array() || bb.size() != 4 || !rj["caption"].is_string()) return std::nullopt;
        for (const auto& v : bb)
            if (!v.is_number()) return std::nullopt;
        RegionAnnotation r;
        r.x1 = bb[0].get<double>();
        r.y1 = bb[1].get<double>();
        r.x2 = bb[2].get<double>();
        r.y2 = bb[3].get<double>();
        r.caption = rj["caption"].get<std::string>();
        rec.regions.push_back(std::move(r));
    }
    return rec;
}

inline std::string qa_sample_to_json_line(const QASample& s) {
    nlohmann::json j;
    j["sample_id"] = s.sample_id;
    j["record_id"] = s.record_id;
    j["task"] = task_name(s.task);
    j["question"] = s.question;
    j["answer"] = s.answer;
    j["bbox"] = s.bbox ? bbox_to_json(*s.bbox) : nlohmann::json(nullptr);
    j["image"] = s.image_ref;
    return j.dump();
}

inline std::optional<QASample> parse_qa_sample_line(const std::string& line) {
    const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    QASample s;
    try {
        s.sample_id = j.at("sample_id").get<std::string>();
        s.record_id = j.at("record_id").get<std::string>();
        const auto task = task_from_name(j.at("task").get<std::string>());
        if (!task) return std::nullopt;
        s.task = *task;
        s.question = j.at("question").get<std::string>();
        s.answer = j.at("answer").get<std::string>();
        s.image_ref = j.at("image").get<std::string>();
        if (!j.at("bbox").is_null()) {
            const auto& bb = j.at("bbox");
            if (!bb.is_array() || bb.size() != 4) return std::nullopt;
            s.bbox = NormBBox{bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                              bb[3].get<double>()};
        }
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
    return s;
}

// ---- pipeline ----

namespace detail_corpus {

inline void bump(std::map<std::string, std::uint64_t>& m, const std::string& k) { ++m[k]; }

}  // namespace detail_corpus

// Full curation pass over one parsed record; appends emitted samples and
// updates stats. Region accounting starts only once the image passes
// validation; accepted regions of a record later rejected at record level
// are re-counted under "record_rejected" so that emitted pairs always equal
// 2 * regions_accepted.
inline void curate_record(const RawRecord& rec, const CurationConfig& cfg, CurationStats& stats,
                          std::vector<QASample>& out) {
    ++stats.records_in;
    const FilterResult img = validate_image(rec, cfg);
    if (!img.accepted) {
        detail_corpus::bump(stats.rejects_by_reason, img.reason);
        return;
    }
    RawRecord kept = rec;
    kept.regions.clear();
    stats.regions_in += rec.regions.size();
    std::vector<std::string> region_rejects;
    for (const RegionAnnotation& r : rec.regions) {
        const FilterResult fr = filter_region(r, rec.width_px, rec.height_px, cfg);
        if (fr.accepted)
            kept.regions.push_back(r);
        else
            region_rejects.push_back("region_" + fr.reason);
    }
    for (const auto& reason : region_rejects) detail_corpus::bump(stats.rejects_by_reason, reason);

    if (static_cast<long long>(kept.regions.size()) < cfg.min_regions) {
        detail_corpus::bump(stats.rejects_by_reason, "min_regions");
        for (std::size_t i = 0; i < kept.regions.size(); ++i)
            detail_corpus::bump(stats.rejects_by_reason, "record_rejected");
        return;
    }
    ++stats.records_accepted;
    stats.regions_accepted += kept.regions.size();
    for (QASample& s : reformat(kept)) {
        detail_corpus::bump(stats.qa_samples_emitted_by_task, task_name(s.task));
        out.push_back(std::move(s));
    }
}

inline nlohmann::json stats_to_json(const CurationStats& stats) {
    nlohmann::json j;
    j["records_in"] = stats.records_in;
    j["records_accepted"] = stats.records_accepted;
    j["regions_in"] = stats.regions_in;
    j["regions_accepted"] = stats.regions_accepted;
    j["rejects_by_reason"] = stats.rejects_by_reason;
    j["qa_samples_emitted_by_task"] = stats.qa_samples_emitted_by_task;
    return j;
}

// Streams input shards, curates every line (malformed ones are counted and
// skipped), optionally applies source balancing, and writes name-sorted
// QA shards of at most cfg.shard_lines lines plus stats.json. Output is a
// pure function of (input bytes, cfg).
inline CurationStats curate_corpus(const std::vector<std::filesystem::path>& input_shards,
                                   const CurationConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);

    CurationStats stats;
    std::vector<QASample> samples;
    std::vector<std::filesystem::path> sorted = input_shards;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& path : sorted) {
        std::ifstream in(path);
        if (!in) throw IoError("curate: cannot open input shard " + path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto rec = parse_record_line(line);
            if (!rec) {
                ++stats.records_in;
                detail_corpus::bump(stats.rejects_by_reason, "parse");
                continue;
            }
            curate_record(*rec, cfg, stats, samples);
        }
    }

    if (cfg.sample_total > 0) {
        std::map<std::string, std::vector<QASample>> streams;
        for (QASample& s : samples) streams[s.source].push_back(std::move(s));
        std::map<std::string, double> weights = cfg.source_sampling_weights;
        if (weights.empty())
            for (const auto& [src, v] : streams) weights[src] = 1.0;
        samples = balance_sample(streams, weights, cfg.sample_total, cfg.seed);
        stats.qa_samples_emitted_by_task.clear();
        for (const QASample& s : samples)
            detail_corpus::bump(stats.qa_samples_emitted_by_task, task_name(s.task));
    }

    // Order-independent shard assignment: global sort by sample_id, then
    // sequential chunks, so any parallel schedule lands on identical bytes.
    std::sort(samples.begin(), samples.end(),
              [](const QASample& a, const QASample& b) { return a.sample_id < b.sample_id; });
    const std::size_t shard_count =
        samples.empty() ? 0 : (samples.size() + cfg.shard_lines - 1) / cfg.shard_lines;
    for (std::size_t shard = 0; shard < shard_count; ++shard) {
        char name[32];
        std::snprintf(name, sizeof(name), "qa-%05zu.jsonl", shard);
        std::ofstream out(out_dir / name, std::ios::binary);
        if (!out) throw IoError("curate: cannot write shard " + (out_dir / name).string());
        const std::size_t lo = shard * cfg.shard_lines;
        const std::size_t hi = std::min(samples.size(), lo + cfg.shard_lines);
        for (std::size_t i = lo; i < hi; ++i) out << qa_sample_to_json_line(samples[i]) << "\n";
        if (!out) throw IoError("curate: short write");
    }

    std::ofstream sj(out_dir / "stats.json", std::ios::binary);
    if (!sj) throw IoError("curate: cannot write stats.json");
    sj << stats_to_json(stats).dump(2) << "\n";
    return stats;
}

inline std::vector<QASample> load_qa_shards(const std::vector<std::filesystem::path>& paths) {
    std::vector<std::filesystem::path> sorted = paths;
    std::sort(sorted.begin(), sorted.end());
    std::vector<QASample> out;
    for (const auto& path : sorted) {
        std::ifstream in(path);
        if (!in) throw IoError("load_qa_shards: cannot open " + path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto s = parse_qa_sample_line(line);
            if (!s) throw IoError("load_qa_shards: malformed line in " + path.string());
            out.push_back(std::move(*s));
        }
    }
    return out;
}

// Minimal '*' glob over one directory component; plain paths pass through.
inline std::vector<std::filesystem::path> expand_glob(const std::string& pattern) {
    const auto star = pattern.find('*');
    if (star == std::string::npos) return {pattern};
    const std::filesystem::path p(pattern);
    const std::filesystem::path dir = p.parent_path().empty() ? "." : p.parent_path();
    const std::string file_pat = p.filename().string();
    auto matches = [](const std::string& pat, const std::string& name) {
        // Single-wildcard match: prefix*suffix.
        const auto pos = pat.find('*');
        const std::string pre = pat.substr(0, pos), suf = pat.substr(pos + 1);
        return name.size() >= pre.size() + suf.size() && name.compare(0, pre.size(), pre) == 0 &&
               name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    std::vector<std::filesystem::path> out;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir, ec))
        if (entry.is_regular_file() && matches(file_pat, entry.path().filename().string()))
            out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace granvit
