#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "granvit/corpus.hpp"
#include "granvit/errors.hpp"
#include "granvit/image.hpp"
#include "granvit/rng.hpp"
#include "granvit/tensor.hpp"

namespace granvit {

// Deterministic shape-world generator. Geometry lives on an 8-px-aligned
// grid of the render canvas so that normalized coordinates are exact on the
// 0.001 lattice (multiples of 0.125) and survive quantization untouched;
// records are emitted at an 8x nominal scale so the default curation
// thresholds (448 short side, 100^2 bbox area) pass by construction.
struct SynthConfig {
    std::size_t canvas_px = 64;       // render size
    std::size_t nominal_factor = 8;   // record scale = canvas_px * factor
    std::size_t grid_step = 8;        // shape alignment on the render canvas
    std::size_t max_shapes = 3;

    std::size_t nominal_px() const { return canvas_px * nominal_factor; }
};

struct ShapeSpec {
    std::string kind;   // square | bar | cross
    std::string color;  // palette name
    long long x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // render-canvas pixels
};

struct Scene {
    std::vector<ShapeSpec> shapes;
    std::string global_caption;
};

struct SceneRecord {
    RawRecord record;  // nominal-scale coordinates
    Tensor image;      // rendered canvas (canvas_px, canvas_px, 3)
    Scene scene;
};

inline const std::vector<std::pair<std::string, std::array<double, 3>>>& color_palette() {
    static const std::vector<std::pair<std::string, std::array<double, 3>>> kPalette{
        {"red", {1, 0, 0}},     {"green", {0, 1, 0}},   {"blue", {0, 0, 1}},
        {"yellow", {1, 1, 0}},  {"cyan", {0, 1, 1}},    {"magenta", {1, 0, 1}},
        {"orange", {1, 0.5, 0}}, {"white", {1, 1, 1}}};
    return kPalette;
}

namespace detail_synth {

inline void fill_rect(Tensor& img, long long x1, long long y1, long long x2, long long y2,
                      const std::array<double, 3>& rgb) {
    const std::size_t w = img.dim(1);
    for (long long y = y1; y < y2; ++y)
        for (long long x = x1; x < x2; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.mutable_data()[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3 + c] =
                    rgb[c];
}

inline void draw_shape(Tensor& img, const ShapeSpec& s, const std::array<double, 3>& rgb) {
    if (s.kind == "cross") {
        // Plus sign with arm thickness half the side: covers 3/4 of the bbox,
        // keeping the declared color the strict pixel majority.
        const long long k = s.x2 - s.x1, t = k / 2;
        const long long pad = (k - t) / 2;
        fill_rect(img, s.x1, s.y1 + pad, s.x2, s.y1 + pad + t, rgb);
        fill_rect(img, s.x1 + pad, s.y1, s.x1 + pad + t, s.y2, rgb);
    } else {
        fill_rect(img, s.x1, s.y1, s.x2, s.y2, rgb);
    }
}

inline bool overlaps(const ShapeSpec& a, const ShapeSpec& b) {
    return std::max(a.x1, b.x1) < std::min(a.x2, b.x2) && std::max(a.y1, b.y1) < std::min(a.y2, b.y2);
}

inline std::string enumerate_caption(const std::vector<ShapeSpec>& shapes) {
    std::string out;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (i > 0) out += (i + 1 == shapes.size()) ? " and " : ", ";
        out += "a " + shapes[i].color + " " + shapes[i].kind;
    }
    return out + " on a black background";
}

}  // namespace detail_synth

// One scene: same seed, identical bytes. Region captions are
// "<color> <kind>"; (color, kind) pairs are unique within a scene so
// grounding is unambiguous; shape boxes are pairwise disjoint.
inline SceneRecord gen_scene(std::uint64_t seed, const std::string& record_id,
                             const SynthConfig& cfg = {}) {
    Rng rng(seed);
    const long long canvas = static_cast<long long>(cfg.canvas_px);
    const long long step = static_cast<long long>(cfg.grid_step);

    // Shape-count mix biased toward sparse scenes; single-shape scenes keep
    // region captioning learnable before multi-shape grounding kicks in.
    const double count_draw = rng.uniform();
    std::size_t want = 1;
    if (cfg.max_shapes >= 2 && count_draw >= 0.55) want = 2;
    if (cfg.max_shapes >= 3 && count_draw >= 0.85) want = 3;
    std::vector<ShapeSpec> shapes;
    std::vector<std::pair<std::size_t, std::size_t>> used;  // (kind, color)
    const std::vector<std::string> kinds{"square", "bar", "cross"};
    int attempts = 0;
    while (shapes.size() < want && attempts < 200) {
        ++attempts;
        const std::size_t kind = rng.below(kinds.size());
        const std::size_t color = rng.below(color_palette().size());
        bool dup = false;
        for (auto [k, c] : used) dup = dup || (k == kind && c == color);
        if (dup) continue;

        long long w = 0, h = 0;
        if (kind == 0) {  // square
            const long long sizes[]{16, 24, 32};
            w = h = sizes[rng.below(3)];
        } else if (kind == 1) {  // bar, 2:1
            const bool horizontal = rng.below(2) == 0;
            w = horizontal ? 32 : 16;
            h = horizontal ? 16 : 32;
        } else {  // cross, square bbox with even half-thickness
            const long long sizes[]{24, 32};
            w = h = sizes[rng.below(2)];
        }
        ShapeSpec s;
        s.kind = kinds[kind];
        s.color = color_palette()[color].first;
        s.x1 = step * static_cast<long long>(rng.below(static_cast<std::uint64_t>((canvas - w) / step + 1)));
        s.y1 = step * static_cast<long long>(rng.below(static_cast<std::uint64_t>((canvas - h) / step + 1)));
        s.x2 = s.x1 + w;
        s.y2 = s.y1 + h;

        bool collide = false;
        for (const ShapeSpec& other : shapes) collide = collide || detail_synth::overlaps(s, other);
        if (collide) continue;
        used.emplace_back(kind, color);
        shapes.push_back(std::move(s));
    }

    SceneRecord out;
    out.scene.shapes = shapes;
    out.scene.global_caption = detail_synth::enumerate_caption(shapes);

    out.image = Tensor::zeros({cfg.canvas_px, cfg.canvas_px, 3});
    for (const ShapeSpec& s : shapes) {
        const auto& palette = color_palette();
        for (const auto& [name, rgb] : palette)
            if (name == s.color) detail_synth::draw_shape(out.image, s, rgb);
    }

    RawRecord& rec = out.record;
    rec.record_id = record_id;
    rec.source = "natural";
    rec.width_px = static_cast<long long>(cfg.nominal_px());
    rec.height_px = static_cast<long long>(cfg.nominal_px());
    rec.image_ref = "images/" + record_id + ".ppm";
    rec.global_caption = out.scene.global_caption;
    const auto f = static_cast<long long>(cfg.nominal_factor);
    for (const ShapeSpec& s : shapes)
        rec.regions.push_back(RegionAnnotation{static_cast<double>(s.x1 * f), static_cast<double>(s.y1 * f),
                                               static_cast<double>(s.x2 * f), static_cast<double>(s.y2 * f),
                                               s.color + " " + s.kind});
    return out;
}

// n records in the corpus-curation input format plus rendered images.
// Per-record seeds are counter-derived, so any record is reproducible in
// isolation.
inline std::vector<std::filesystem::path> gen_corpus(std::size_t n, std::uint64_t seed,
                                                     const std::filesystem::path& out_dir,
                                                     const SynthConfig& cfg = {}) {
    if (n < 1) throw ConfigError("gen_corpus: n must be >= 1");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    const std::filesystem::path shard = out_dir / "records-00000.jsonl";
    std::ofstream out(shard, std::ios::binary);
    if (!out) throw IoError("gen_corpus: cannot write " + shard.string());
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "scene-%06zu", i);
        const SceneRecord sr = gen_scene(mix_seed(seed, i), id, cfg);
        write_ppm(out_dir / sr.record.image_ref, sr.image);
        out << record_to_json_line(sr.record) << "\n";
    }
    if (!out) throw IoError("gen_corpus: short write to " + shard.string());
    return {shard};
}

}  // namespace granvit
