#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "granvit/errors.hpp"

namespace granvit {

// Resolution-independent box in [0,1], quantized to the 0.001 grid.
struct NormBBox {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }

    bool valid() const {
        return x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 && x1 < x2 && y1 < y2;
    }

    bool operator==(const NormBBox& o) const = default;
};

// Half-away-from-zero rounding to 3 decimals.
inline double quantize3(double v) { return static_cast<double>(std::llround(v * 1000.0)) / 1000.0; }

namespace detail {
inline long long milli3(double v) { return std::llround(v * 1000.0); }
}  // namespace detail

// Quantize a [0,1] box to the 0.001 grid, clamping and re-widening edges the
// quantization collapsed.
inline NormBBox quantize_norm_bbox(double x1, double y1, double x2, double y2) {
    auto clamp_milli = [](double v) {
        return std::clamp(detail::milli3(v), 0LL, 1000LL);
    };
    long long mx1 = clamp_milli(x1), my1 = clamp_milli(y1);
    long long mx2 = clamp_milli(x2), my2 = clamp_milli(y2);
    if (mx1 >= mx2) {
        if (mx2 + 1 <= 1000)
            mx2 = mx1 + 1;
        else
            mx1 = mx2 - 1;
    }
    if (my1 >= my2) {
        if (my2 + 1 <= 1000)
            my2 = my1 + 1;
        else
            my1 = my2 - 1;
    }
    return NormBBox{mx1 / 1000.0, my1 / 1000.0, mx2 / 1000.0, my2 / 1000.0};
}

inline double iou(const NormBBox& a, const NormBBox& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

// Fraction of predictions present with iou >= tau; absent predictions count
// as misses.
inline double acc_at_iou(const std::vector<std::optional<NormBBox>>& preds,
                         const std::vector<NormBBox>& gts, double tau = 0.5) {
    if (preds.size() != gts.size())
        throw LengthMismatchError("acc_at_iou: " + std::to_string(preds.size()) + " preds vs " +
                                  std::to_string(gts.size()) + " ground truths");
    if (preds.empty()) throw EmptySetError("acc_at_iou: empty input");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i].has_value() && iou(*preds[i], gts[i]) >= tau) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

}  // namespace granvit
