#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "granvit/bbox.hpp"
#include "granvit/errors.hpp"
#include "granvit/tape.hpp"
#include "granvit/tensor.hpp"

namespace granvit {

// Images are (H,W,3) tensors with values in [0,1]. Stored as binary PPM so
// round-trips are lossless at 8-bit depth and byte-deterministic.

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeMismatchError("write_ppm: image must be (H,W,3)");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_ppm: cannot open " + path.string());
    const std::size_t h = image.dim(0), w = image.dim(1);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const long long v = std::llround(image.data()[i] * 255.0);
        bytes[i] = static_cast<unsigned char>(std::clamp(v, 0LL, 255LL));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write_ppm: short write to " + path.string());
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_ppm: cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError("read_ppm: not a P6 file: " + path.string());
    auto next_int = [&in, &path]() {
        // Skips whitespace and '#' comments.
        while (true) {
            const int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        long long v = 0;
        in >> v;
        if (!in) throw IoError("read_ppm: malformed header in " + path.string());
        return v;
    };
    const long long w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("read_ppm: unsupported header in " + path.string());
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h * 3));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw IoError("read_ppm: truncated pixel data in " + path.string());
    std::vector<double> data(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = bytes[i] / 255.0;
    return Tensor::from_data({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3},
                             std::move(data));
}

// General bilinear resize (no gradient path; inputs are raw pixels).
inline Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w) {
    if (image.rank() != 3) throw ShapeMismatchError("resize_bilinear: image must be (H,W,C)");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    std::vector<SamplePoint> pts;
    pts.reserve(out_h * out_w);
    const double sx = static_cast<double>(w) / static_cast<double>(out_w);
    const double sy = static_cast<double>(h) / static_cast<double>(out_h);
    for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j)
            pts.push_back({(static_cast<double>(j) + 0.5) * sx, (static_cast<double>(i) + 0.5) * sy});
    Tape tape(false);
    return tape.reshape(tape.bilinear_sample(image, pts), {out_h, out_w, c});
}

// Original-pixel -> padded-canvas mapping: canvas = orig * scale + offset.
struct PadAffine {
    double scale_x = 1.0, scale_y = 1.0;
    double offset_x = 0.0, offset_y = 0.0;
    std::size_t canvas_px = 0;
};

struct ResizePadResult {
    Tensor image;   // (img_px, img_px, 3)
    Tensor mask;    // (img_px, img_px, 1), 1 on content
    PadAffine affine;
};

// Longer side scaled to img_px, shorter side centered with zero padding.
inline ResizePadResult resize_pad(const Tensor& image, std::size_t img_px) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeMismatchError("resize_pad: image must be (H,W,3)");
    const std::size_t h = image.dim(0), w = image.dim(1);
    const double s = static_cast<double>(img_px) / static_cast<double>(std::max(h, w));
    std::size_t ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(h * s)));
    std::size_t cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(w * s)));
    ch = std::min(ch, img_px);
    cw = std::min(cw, img_px);
    const Tensor content = (ch == h && cw == w) ? image : resize_bilinear(image, ch, cw);
    const std::size_t oy = (img_px - ch) / 2, ox = (img_px - cw) / 2;

    Tensor canvas = Tensor::zeros({img_px, img_px, 3});
    Tensor mask = Tensor::zeros({img_px, img_px, 1});
    for (std::size_t i = 0; i < ch; ++i) {
        std::copy_n(content.data().data() + i * cw * 3, cw * 3,
                    canvas.mutable_data().data() + ((i + oy) * img_px + ox) * 3);
        for (std::size_t j = 0; j < cw; ++j) mask.mutable_data()[(i + oy) * img_px + ox + j] = 1.0;
    }
    PadAffine affine{static_cast<double>(cw) / static_cast<double>(w),
                     static_cast<double>(ch) / static_cast<double>(h),
                     static_cast<double>(ox), static_cast<double>(oy), img_px};
    return ResizePadResult{std::move(canvas), std::move(mask), affine};
}

// Re-express a box normalized against the original image in padded-canvas
// normalized coordinates.
inline NormBBox map_bbox_to_canvas(const PadAffine& affine, const NormBBox& b, std::size_t orig_w,
                                   std::size_t orig_h) {
    const double inv = 1.0 / static_cast<double>(affine.canvas_px);
    return NormBBox{(b.x1 * static_cast<double>(orig_w) * affine.scale_x + affine.offset_x) * inv,
                    (b.y1 * static_cast<double>(orig_h) * affine.scale_y + affine.offset_y) * inv,
                    (b.x2 * static_cast<double>(orig_w) * affine.scale_x + affine.offset_x) * inv,
                    (b.y2 * static_cast<double>(orig_h) * affine.scale_y + affine.offset_y) * inv};
}

}  // namespace granvit
