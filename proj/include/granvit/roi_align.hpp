#pragma once

#include <vector>

#include "granvit/bbox.hpp"
#include "granvit/errors.hpp"
#include "granvit/tape.hpp"
#include "granvit/tensor.hpp"

namespace granvit {

// Quantization-free ROI pooling: the box is mapped to continuous grid
// coordinates (x*W, y*H), each of the out_size^2 bins is sampled at
// sampling^2 uniformly spaced interior points by bilinear interpolation
// (border-clamped), and bin values are sample means. Differentiable in the
// grid through the shared bilinear kernel.
inline Tensor roi_align(Tape& tape, const Tensor& grid, const NormBBox& box, std::size_t out_size,
                        std::size_t sampling = 2) {
    if (grid.rank() != 3) throw ShapeMismatchError("roi_align: grid must be (H,W,C)");
    if (out_size < 1 || sampling < 1) throw ShapeMismatchError("roi_align: out_size and sampling must be >= 1");
    const auto h = static_cast<double>(grid.dim(0));
    const auto w = static_cast<double>(grid.dim(1));
    const std::size_t c = grid.dim(2);
    const double gx1 = box.x1 * w, gx2 = box.x2 * w;
    const double gy1 = box.y1 * h, gy2 = box.y2 * h;
    if (gx2 - gx1 < 1e-9 || gy2 - gy1 < 1e-9)
        throw DegenerateBoxError("roi_align: box degenerates on the grid");

    const std::size_t g = out_size, s = sampling;
    const double bin_w = (gx2 - gx1) / static_cast<double>(g);
    const double bin_h = (gy2 - gy1) / static_cast<double>(g);

    std::vector<SamplePoint> points;
    points.reserve(g * g * s * s);
    for (std::size_t by = 0; by < g; ++by)
        for (std::size_t bx = 0; bx < g; ++bx)
            for (std::size_t sy = 0; sy < s; ++sy)
                for (std::size_t sx = 0; sx < s; ++sx)
                    points.push_back({gx1 + bin_w * (static_cast<double>(bx) +
                                                     (static_cast<double>(sx) + 0.5) / static_cast<double>(s)),
                                      gy1 + bin_h * (static_cast<double>(by) +
                                                     (static_cast<double>(sy) + 0.5) / static_cast<double>(s))});

    Tensor samples = tape.bilinear_sample(grid, points);  // (g*g*s*s, c)
    if (s == 1) return tape.reshape(samples, {g, g, c});

    // Bin means via a constant pooling matrix, keeping backward on tape ops.
    const std::size_t n = g * g * s * s;
    std::vector<double> pool(g * g * n, 0.0);
    const double inv = 1.0 / static_cast<double>(s * s);
    for (std::size_t bin = 0; bin < g * g; ++bin)
        for (std::size_t k = 0; k < s * s; ++k) pool[bin * n + bin * s * s + k] = inv;
    Tensor pooled = tape.matmul(Tensor::from_data({g * g, n}, std::move(pool)), samples);
    return tape.reshape(pooled, {g, g, c});
}

// Pure (no-gradient) convenience wrapper.
inline Tensor roi_align(const Tensor& grid, const NormBBox& box, std::size_t out_size,
                        std::size_t sampling = 2) {
    Tape tape(false);
    return roi_align(tape, grid, box, out_size, sampling);
}

// Axis-aligned crop in absolute pixel coordinates followed by a bilinear
// resize to an out_px square; aspect distortion accepted.
inline Tensor crop_resize(Tape& tape, const Tensor& image, double x1, double y1, double x2,
                          double y2, std::size_t out_px) {
    if (image.rank() != 3) throw ShapeMismatchError("crop_resize: image must be (H,W,C)");
    if (out_px < 1) throw ShapeMismatchError("crop_resize: out_px must be >= 1");
    const double cw = x2 - x1, ch = y2 - y1;
    if (cw < 1e-9 || ch < 1e-9) throw DegenerateBoxError("crop_resize: empty crop window");
    const std::size_t c = image.dim(2);

    std::vector<SamplePoint> points;
    points.reserve(out_px * out_px);
    for (std::size_t i = 0; i < out_px; ++i)
        for (std::size_t j = 0; j < out_px; ++j)
            points.push_back({x1 + (static_cast<double>(j) + 0.5) * cw / static_cast<double>(out_px),
                              y1 + (static_cast<double>(i) + 0.5) * ch / static_cast<double>(out_px)});
    Tensor samples = tape.bilinear_sample(image, points);
    return tape.reshape(samples, {out_px, out_px, c});
}

inline Tensor crop_resize(const Tensor& image, double x1, double y1, double x2, double y2,
                          std::size_t out_px) {
    Tape tape(false);
    return crop_resize(tape, image, x1, y1, x2, y2, out_px);
}

}  // namespace granvit
