#pragma once

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>

#include "granvit/bbox.hpp"

namespace granvit {

// Canonical rendering shared by the QA templates and the model's answers:
// "[0.123, 0.456, 0.789, 0.901]", always 3 decimals.
inline std::string format_bbox_text(const NormBBox& b) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "[%.3f, %.3f, %.3f, %.3f]", b.x1, b.y1, b.x2, b.y2);
    return buf;
}

// Strict parse of a whole string: whitespace-tolerant bracketed 4-tuple.
// Returns nullopt (a grounding miss, not an error) on non-numeric input,
// wrong arity, or a box that degenerates after clamping.
inline std::optional<NormBBox> parse_bbox_text(std::string_view s) {
    const char* p = s.data();
    const char* end = s.data() + s.size();
    auto skip_ws = [&] {
        while (p < end && (*p == ' ' || *p == '\t' || *p == '\n' || *p == '\r')) ++p;
    };
    skip_ws();
    if (p >= end || *p != '[') return std::nullopt;
    ++p;
    double vals[4];
    for (int i = 0; i < 4; ++i) {
        skip_ws();
        char* after = nullptr;
        std::string chunk(p, end);  // strtod needs a terminated buffer
        const double v = std::strtod(chunk.c_str(), &after);
        if (after == chunk.c_str()) return std::nullopt;
        p += after - chunk.c_str();
        vals[i] = v;
        skip_ws();
        if (i < 3) {
            if (p >= end || *p != ',') return std::nullopt;
            ++p;
        }
    }
    if (p >= end || *p != ']') return std::nullopt;
    ++p;
    skip_ws();
    if (p != end) return std::nullopt;

    auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
    const NormBBox box{quantize3(clamp01(vals[0])), quantize3(clamp01(vals[1])),
                       quantize3(clamp01(vals[2])), quantize3(clamp01(vals[3]))};
    if (!box.valid()) return std::nullopt;
    return box;
}

// Tolerant scan used when scoring generations: first bracketed 4-tuple wins.
inline std::optional<NormBBox> scan_bbox_text(std::string_view s) {
    for (std::size_t open = s.find('['); open != std::string_view::npos; open = s.find('[', open + 1)) {
        const std::size_t close = s.find(']', open);
        if (close == std::string_view::npos) return std::nullopt;
        if (auto box = parse_bbox_text(s.substr(open, close - open + 1))) return box;
    }
    return std::nullopt;
}

}  // namespace granvit
