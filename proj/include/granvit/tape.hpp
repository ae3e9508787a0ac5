#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "granvit/errors.hpp"
#include "granvit/tensor.hpp"

namespace granvit {

// Continuous sample location in pixel units; cell centers sit at index + 0.5.
struct SamplePoint {
    double x = 0.0;
    double y = 0.0;
};

using GradMap = std::unordered_map<const detail::TensorNode*, std::vector<double>>;

class BackwardResult {
public:
    explicit BackwardResult(GradMap grads) : grads_(std::move(grads)) {}

    bool has(const Tensor& t) const { return grads_.count(t.node()) > 0; }

    // Gradient of `loss` w.r.t. `t`; zeros when t did not contribute.
    Tensor grad(const Tensor& t) const {
        auto it = grads_.find(t.node());
        if (it == grads_.end()) return Tensor::zeros(t.shape());
        return Tensor::from_data(t.shape(), it->second);
    }

private:
    GradMap grads_;
};

// Eager reverse-mode tape. Ops compute forward immediately and append a
// backward closure when any input requires grad. A tape is confined to one
// logical thread; backward walks the records once, in reverse.
class Tape {
public:
    explicit Tape(bool grad_enabled = true)
        : grad_enabled_(grad_enabled), id_(next_id()++) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t num_nodes() const { return records_.size(); }

    // ---- elementwise binary (rhs may broadcast as a trailing-suffix shape) ----

    Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, "add", BinOp::Add); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, "sub", BinOp::Sub); }
    Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, "mul", BinOp::Mul); }

    // Multiply by a compile-side constant.
    Tensor scale(const Tensor& a, double c) {
        std::vector<double> out(a.size());
        const auto& ad = a.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
        auto an = a.node_;
        return make_output(a.shape(), std::move(out), "scale", {a},
                           [an, c](const std::vector<double>& g, GradMap& grads) {
                               if (!an->requires_grad) return;
                               auto& ga = grad_buf(grads, an.get());
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                           });
    }

    Tensor sum(const Tensor& a) { return scale(mean(a), static_cast<double>(a.size())); }

    // ---- linear algebra ----

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
            throw ShapeMismatchError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        std::vector<double> out(m * n, 0.0);
        matmul_raw(a.data().data(), b.data().data(), out.data(), m, k, n);
        auto an = a.node_, bn = b.node_;
        return make_output({m, n}, std::move(out), "matmul", {a, b},
                           [an, bn, m, k, n](const std::vector<double>& g, GradMap& grads) {
                               if (an->requires_grad) {
                                   auto& ga = grad_buf(grads, an.get());
                                   // ga += g (m,n) * b^T (n,k)
                                   matmul_acc_bt(g.data(), bn->data.data(), ga.data(), m, n, k);
                               }
                               if (bn->requires_grad) {
                                   auto& gb = grad_buf(grads, bn.get());
                                   // gb += a^T (k,m) * g (m,n)
                                   matmul_acc_at(an->data.data(), g.data(), gb.data(), m, k, n);
                               }
                           });
    }

    Tensor transpose(const Tensor& a) {
        if (a.rank() != 2) throw ShapeMismatchError("transpose: rank-2 required, got " + shape_str(a.shape()));
        const std::size_t m = a.dim(0), n = a.dim(1);
        std::vector<double> out(m * n);
        const auto& ad = a.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
        auto an = a.node_;
        return make_output({n, m}, std::move(out), "transpose", {a},
                           [an, m, n](const std::vector<double>& g, GradMap& grads) {
                               if (!an->requires_grad) return;
                               auto& ga = grad_buf(grads, an.get());
                               for (std::size_t j = 0; j < n; ++j)
                                   for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
                           });
    }

    Tensor reshape(const Tensor& a, Shape shape) {
        if (shape_numel(shape) != a.size())
            throw ShapeMismatchError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
        auto an = a.node_;
        return make_output(std::move(shape), a.data(), "reshape", {a},
                           [an](const std::vector<double>& g, GradMap& grads) {
                               if (!an->requires_grad) return;
                               auto& ga = grad_buf(grads, an.get());
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           });
    }

    Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
        if (parts.empty()) throw ShapeMismatchError("concat: no inputs");
        const Shape& s0 = parts[0].shape();
        if (axis >= s0.size()) throw ShapeMismatchError("concat: axis out of range");
        std::size_t axis_total = 0;
        for (const Tensor& p : parts) {
            if (p.rank() != s0.size()) throw ShapeMismatchError("concat: rank mismatch");
            for (std::size_t d = 0; d < s0.size(); ++d)
                if (d != axis && p.dim(d) != s0[d]) throw ShapeMismatchError("concat: dim mismatch");
            axis_total += p.dim(axis);
        }
        Shape out_shape = s0;
        out_shape[axis] = axis_total;
        std::size_t outer = 1, inner = 1;
        for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
        for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

        std::vector<double> out(shape_numel(out_shape));
        const std::size_t out_stride = axis_total * inner;
        std::size_t axis_off = 0;
        for (const Tensor& p : parts) {
            const std::size_t chunk = p.dim(axis) * inner;
            const auto& pd = p.data();
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(pd.data() + o * chunk, chunk, out.data() + o * out_stride + axis_off * inner);
            axis_off += p.dim(axis);
        }

        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        std::vector<std::size_t> chunks;
        for (const Tensor& p : parts) {
            nodes.push_back(p.node_);
            chunks.push_back(p.dim(axis) * inner);
        }
        return make_output(std::move(out_shape), std::move(out), "concat", parts,
                           [nodes, chunks, outer, out_stride, inner](const std::vector<double>& g, GradMap& grads) {
                               std::size_t axis_off = 0;
                               for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                                   const std::size_t chunk = chunks[pi];
                                   if (nodes[pi]->requires_grad) {
                                       auto& gp = grad_buf(grads, nodes[pi].get());
                                       for (std::size_t o = 0; o < outer; ++o) {
                                           const double* src = g.data() + o * out_stride + axis_off;
                                           double* dst = gp.data() + o * chunk;
                                           for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                       }
                                   }
                                   axis_off += chunk;
                               }
                           });
    }

    Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
        if (axis >= a.rank()) throw ShapeMismatchError("slice: axis out of range");
        if (start + len > a.dim(axis))
            throw ShapeMismatchError("slice: range [" + std::to_string(start) + "," +
                                     std::to_string(start + len) + ") exceeds dim " +
                                     std::to_string(a.dim(axis)));
        Shape out_shape = a.shape();
        out_shape[axis] = len;
        std::size_t outer = 1, inner = 1;
        for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
        for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
        const std::size_t in_stride = a.dim(axis) * inner;
        const std::size_t out_chunk = len * inner;

        std::vector<double> out(shape_numel(out_shape));
        const auto& ad = a.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(ad.data() + o * in_stride + start * inner, out_chunk, out.data() + o * out_chunk);

        auto an = a.node_;
        return make_output(std::move(out_shape), std::move(out), "slice", {a},
                           [an, outer, in_stride, out_chunk, start, inner](const std::vector<double>& g,
                                                                           GradMap& grads) {
                               if (!an->requires_grad) return;
                               auto& ga = grad_buf(grads, an.get());
                               for (std::size_t o = 0; o < outer; ++o) {
                                   const double* src = g.data() + o * out_chunk;
                                   double* dst = ga.data() + o * in_stride + start * inner;
                                   for (std::size_t i = 0; i < out_chunk; ++i) dst[i] += src[i];
                               }
                           });
    }

    // ---- reductions / losses ----

    Tensor mean(const Tensor& a) {
        if (a.size() == 0) throw ShapeMismatchError("mean: empty tensor");
        double acc = 0.0;
        for (double v : a.data()) acc += v;
        const double inv_n = 1.0 / static_cast<double>(a.size());
        auto an = a.node_;
        return make_output(Shape{}, {acc * inv_n}, "mean", {a},
                           [an, inv_n](const std::vector<double>& g, GradMap& grads) {
                               if (!an->requires_grad) return;
                               auto& ga = grad_buf(grads, an.get());
                               const double gv = g[0] * inv_n;
                               for (double& x : ga) x += gv;
                           });
    }

    Tensor mse(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape())
            throw ShapeMismatchError("mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        const std::size_t n = a.size();
        const auto& ad = a.data();
        const auto& bd = b.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = ad[i] - bd[i];
            acc += d * d;
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        auto an = a.node_, bn = b.node_;
        return make_output(Shape{}, {acc * inv_n}, "mse", {a, b},
                           [an, bn, inv_n](const std::vector<double>& g, GradMap& grads) {
                               const std::size_t n = an->data.size();
                               const double c = 2.0 * inv_n * g[0];
                               if (an->requires_grad) {
                                   auto& ga = grad_buf(grads, an.get());
                                   for (std::size_t i = 0; i < n; ++i)
                                       ga[i] += c * (an->data[i] - bn->data[i]);
                               }
                               if (bn->requires_grad) {
                                   auto& gb = grad_buf(grads, bn.get());
                                   for (std::size_t i = 0; i < n; ++i)
                                       gb[i] -= c * (an->data[i] - bn->data[i]);
                               }
                           });
    }

    // ---- nonlinearities ----

    // Softmax over the last axis, max-subtracted.
    Tensor softmax(const Tensor& a) {
        if (a.rank() == 0) throw ShapeMismatchError("softmax: rank >= 1 required");
        const std::size_t last = a.dim(a.rank() - 1);
        const std::size_t rows = a.size() / last;
        std::vector<double> out(a.size());
        const auto& ad = a.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = ad.data() + r * last;
            double* y = out.data() + r * last;
            double mx = x[0];
            for (std::size_t j = 1; j < last; ++j) mx = std::max(mx, x[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < last; ++j) {
                // exp underflows to exactly 0 below -745.2; skipping the call
                // keeps additive -1e9 attention masks cheap and bit-identical.
                const double d = x[j] - mx;
                y[j] = d < -746.0 ? 0.0 : std::exp(d);
                s += y[j];
            }
            const double inv = 1.0 / s;
            for (std::size_t j = 0; j < last; ++j) y[j] *= inv;
        }
        auto an = a.node_;
        Tensor result = make_output(a.shape(), std::move(out), "softmax", {a}, nullptr);
        if (result.node_->producer >= 0) {
            auto yn = result.node_;
            records_[static_cast<std::size_t>(result.node_->producer)].backward =
                [an, yn, last, rows](const std::vector<double>& g, GradMap& grads) {
                    if (!an->requires_grad) return;
                    auto& ga = grad_buf(grads, an.get());
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* y = yn->data.data() + r * last;
                        const double* gr = g.data() + r * last;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < last; ++j) dot += gr[j] * y[j];
                        double* out = ga.data() + r * last;
                        for (std::size_t j = 0; j < last; ++j) out[j] += y[j] * (gr[j] - dot);
                    }
                };
        }
        return result;
    }

    // LayerNorm over the last axis with learnable gain/bias, biased variance.
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
        if (x.rank() == 0) throw ShapeMismatchError("layer_norm: rank >= 1 required");
        const std::size_t n = x.dim(x.rank() - 1);
        if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
            throw ShapeMismatchError("layer_norm: gain/bias must have shape (" + std::to_string(n) + ")");
        const std::size_t rows = x.size() / n;
        std::vector<double> out(x.size());
        auto xhat = std::make_shared<std::vector<double>>(x.size());
        auto inv_std = std::make_shared<std::vector<double>>(rows);
        const auto& xd = x.data();
        const auto& gd = gain.data();
        const auto& bd = bias.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = xd.data() + r * n;
            double mu = 0.0;
            for (std::size_t j = 0; j < n; ++j) mu += xr[j];
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double d = xr[j] - mu;
                var += d * d;
            }
            var /= static_cast<double>(n);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t j = 0; j < n; ++j) {
                const double xh = (xr[j] - mu) * is;
                (*xhat)[r * n + j] = xh;
                out[r * n + j] = xh * gd[j] + bd[j];
            }
        }
        auto xn = x.node_, gn = gain.node_, bn = bias.node_;
        return make_output(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                           [xn, gn, bn, xhat, inv_std, n, rows](const std::vector<double>& g, GradMap& grads) {
                               const double inv_n = 1.0 / static_cast<double>(n);
                               if (gn->requires_grad) {
                                   auto& gg = grad_buf(grads, gn.get());
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < n; ++j)
                                           gg[j] += g[r * n + j] * (*xhat)[r * n + j];
                               }
                               if (bn->requires_grad) {
                                   auto& gb = grad_buf(grads, bn.get());
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                               }
                               if (xn->requires_grad) {
                                   auto& gx = grad_buf(grads, xn.get());
                                   std::vector<double> dxh(n);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double m1 = 0.0, m2 = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) {
                                           dxh[j] = g[r * n + j] * gn->data[j];
                                           m1 += dxh[j];
                                           m2 += dxh[j] * (*xhat)[r * n + j];
                                       }
                                       m1 *= inv_n;
                                       m2 *= inv_n;
                                       const double is = (*inv_std)[r];
                                       for (std::size_t j = 0; j < n; ++j)
                                           gx[r * n + j] += is * (dxh[j] - m1 - (*xhat)[r * n + j] * m2);
                                   }
                               }
                           });
    }

    // GELU, tanh approximation (kept smooth for finite-difference checks).
    // tanh is evaluated through exp (cheaper than libm tanh here) and the
    // forward values are saved so backward avoids the transcendental.
    Tensor gelu(const Tensor& a) {
        static constexpr double kC = 0.044715;
        const double k = std::sqrt(2.0 / std::numbers::pi);
        std::vector<double> out(a.size());
        auto tanhs = std::make_shared<std::vector<double>>(a.size());
        const auto& ad = a.data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = ad[i];
            const double u = k * (x + kC * x * x * x);
            const double e = std::exp(-2.0 * std::abs(u));
            const double t0 = (1.0 - e) / (1.0 + e);
            const double t = u < 0 ? -t0 : t0;
            (*tanhs)[i] = t;
            out[i] = 0.5 * x * (1.0 + t);
        }
        auto an = a.node_;
        return make_output(a.shape(), std::move(out), "gelu", {a},
                           [an, k, tanhs](const std::vector<double>& g, GradMap& grads) {
                               if (!an->requires_grad) return;
                               auto& ga = grad_buf(grads, an.get());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double x = an->data[i];
                                   const double t = (*tanhs)[i];
                                   const double du = k * (1.0 + 3.0 * kC * x * x);
                                   ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                               }
                           });
    }

    // ---- lookup / sampling ----

    // Gather rows of `table` (V,d) by id; backward scatter-adds.
    Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
        if (table.rank() != 2) throw ShapeMismatchError("embedding: table must be rank-2");
        const std::size_t v = table.dim(0), d = table.dim(1);
        std::vector<double> out(ids.size() * d);
        const auto& td = table.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
                throw ShapeMismatchError("embedding: id " + std::to_string(ids[i]) + " out of range");
            std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
        }
        auto tn = table.node_;
        auto saved_ids = std::make_shared<std::vector<int>>(ids);
        return make_output({ids.size(), d}, std::move(out), "embedding", {table},
                           [tn, saved_ids, d](const std::vector<double>& g, GradMap& grads) {
                               if (!tn->requires_grad) return;
                               auto& gt = grad_buf(grads, tn.get());
                               for (std::size_t i = 0; i < saved_ids->size(); ++i) {
                                   double* dst = gt.data() + static_cast<std::size_t>((*saved_ids)[i]) * d;
                                   const double* src = g.data() + i * d;
                                   for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                               }
                           });
    }

    // Mean of -log softmax(logits)[target] over positions with mask == 1.
    Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<int>& mask) {
        if (logits.rank() != 2) throw ShapeMismatchError("cross_entropy: logits must be rank-2");
        const std::size_t t = logits.dim(0), v = logits.dim(1);
        if (targets.size() != t || mask.size() != t)
            throw ShapeMismatchError("cross_entropy: targets/mask length mismatch");
        std::size_t m = 0;
        for (int b : mask) m += (b != 0);
        if (m == 0) throw EmptyMaskError("cross_entropy: no masked positions");
        const auto& ld = logits.data();
        // Softmax rows of the masked positions are saved for backward.
        auto probs = std::make_shared<std::vector<double>>();
        auto rows = std::make_shared<std::vector<std::size_t>>();
        probs->reserve(m * v);
        rows->reserve(m);
        double loss = 0.0;
        for (std::size_t r = 0; r < t; ++r) {
            if (!mask[r]) continue;
            if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
                throw ShapeMismatchError("cross_entropy: target out of range");
            const double* x = ld.data() + r * v;
            double mx = x[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
            double s = 0.0;
            const std::size_t base = probs->size();
            probs->resize(base + v);
            for (std::size_t j = 0; j < v; ++j) {
                const double e = std::exp(x[j] - mx);
                (*probs)[base + j] = e;
                s += e;
            }
            const double inv_s = 1.0 / s;
            for (std::size_t j = 0; j < v; ++j) (*probs)[base + j] *= inv_s;
            rows->push_back(r);
            loss += mx + std::log(s) - x[static_cast<std::size_t>(targets[r])];
        }
        const double inv_m = 1.0 / static_cast<double>(m);
        auto ln = logits.node_;
        auto saved_t = std::make_shared<std::vector<int>>(targets);
        return make_output(Shape{}, {loss * inv_m}, "cross_entropy", {logits},
                           [ln, saved_t, probs, rows, v, inv_m](const std::vector<double>& g,
                                                                GradMap& grads) {
                               if (!ln->requires_grad) return;
                               auto& gl = grad_buf(grads, ln.get());
                               const double c = g[0] * inv_m;
                               for (std::size_t i = 0; i < rows->size(); ++i) {
                                   const std::size_t r = (*rows)[i];
                                   const double* p = probs->data() + i * v;
                                   double* dst = gl.data() + r * v;
                                   for (std::size_t j = 0; j < v; ++j) dst[j] += c * p[j];
                                   dst[static_cast<std::size_t>((*saved_t)[r])] -= c;
                               }
                           });
    }

    // Bilinear interpolation of a (H,W,C) grid at continuous points, with
    // border clamping. Shared kernel under roi_align and crop_resize.
    Tensor bilinear_sample(const Tensor& grid, const std::vector<SamplePoint>& points) {
        if (grid.rank() != 3) throw ShapeMismatchError("bilinear_sample: grid must be (H,W,C)");
        const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
        std::vector<double> out(points.size() * c);
        const auto& gd = grid.data();
        for (std::size_t p = 0; p < points.size(); ++p) {
            std::size_t x0, x1, y0, y1;
            double tx, ty;
            split_coord(points[p].x, w, x0, x1, tx);
            split_coord(points[p].y, h, y0, y1, ty);
            const double w00 = (1.0 - tx) * (1.0 - ty), w10 = tx * (1.0 - ty);
            const double w01 = (1.0 - tx) * ty, w11 = tx * ty;
            const double* r00 = gd.data() + (y0 * w + x0) * c;
            const double* r10 = gd.data() + (y0 * w + x1) * c;
            const double* r01 = gd.data() + (y1 * w + x0) * c;
            const double* r11 = gd.data() + (y1 * w + x1) * c;
            double* dst = out.data() + p * c;
            for (std::size_t ch = 0; ch < c; ++ch)
                dst[ch] = w00 * r00[ch] + w10 * r10[ch] + w01 * r01[ch] + w11 * r11[ch];
        }
        auto gn = grid.node_;
        auto saved_pts = std::make_shared<std::vector<SamplePoint>>(points);
        return make_output({points.size(), c}, std::move(out), "bilinear_sample", {grid},
                           [gn, saved_pts, h, w, c](const std::vector<double>& g, GradMap& grads) {
                               if (!gn->requires_grad) return;
                               auto& gg = grad_buf(grads, gn.get());
                               for (std::size_t p = 0; p < saved_pts->size(); ++p) {
                                   std::size_t x0, x1, y0, y1;
                                   double tx, ty;
                                   split_coord((*saved_pts)[p].x, w, x0, x1, tx);
                                   split_coord((*saved_pts)[p].y, h, y0, y1, ty);
                                   const double w00 = (1.0 - tx) * (1.0 - ty), w10 = tx * (1.0 - ty);
                                   const double w01 = (1.0 - tx) * ty, w11 = tx * ty;
                                   const double* src = g.data() + p * c;
                                   double* d00 = gg.data() + (y0 * w + x0) * c;
                                   double* d10 = gg.data() + (y0 * w + x1) * c;
                                   double* d01 = gg.data() + (y1 * w + x0) * c;
                                   double* d11 = gg.data() + (y1 * w + x1) * c;
                                   for (std::size_t ch = 0; ch < c; ++ch) {
                                       d00[ch] += w00 * src[ch];
                                       d10[ch] += w10 * src[ch];
                                       d01[ch] += w01 * src[ch];
                                       d11[ch] += w11 * src[ch];
                                   }
                               }
                           });
    }

    // Rearranges each r x r spatial block into r^2 channel groups (raster
    // order within the block). Exact inverse: pixel_unshuffle.
    Tensor pixel_shuffle(const Tensor& grid, std::size_t r) {
        if (grid.rank() != 3) throw ShapeMismatchError("pixel_shuffle: grid must be (H,W,C)");
        const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
        if (r == 0 || h % r != 0 || w % r != 0)
            throw NotDivisibleError("pixel_shuffle: " + shape_str(grid.shape()) + " not divisible by r=" +
                                    std::to_string(r));
        const std::size_t ho = h / r, wo = w / r, co = c * r * r;
        std::vector<double> out(grid.size());
        const auto& gd = grid.data();
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j)
                for (std::size_t dy = 0; dy < r; ++dy)
                    for (std::size_t dx = 0; dx < r; ++dx) {
                        const double* src = gd.data() + ((i * r + dy) * w + (j * r + dx)) * c;
                        double* dst = out.data() + (i * wo + j) * co + (dy * r + dx) * c;
                        std::copy_n(src, c, dst);
                    }
        auto gn = grid.node_;
        return make_output({ho, wo, co}, std::move(out), "pixel_shuffle", {grid},
                           [gn, h, w, c, r, ho, wo, co](const std::vector<double>& g, GradMap& grads) {
                               if (!gn->requires_grad) return;
                               auto& gg = grad_buf(grads, gn.get());
                               for (std::size_t i = 0; i < ho; ++i)
                                   for (std::size_t j = 0; j < wo; ++j)
                                       for (std::size_t dy = 0; dy < r; ++dy)
                                           for (std::size_t dx = 0; dx < r; ++dx) {
                                               const double* src =
                                                   g.data() + (i * wo + j) * co + (dy * r + dx) * c;
                                               double* dst =
                                                   gg.data() + ((i * r + dy) * w + (j * r + dx)) * c;
                                               for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                                           }
                           });
    }

    Tensor pixel_unshuffle(const Tensor& grid, std::size_t r) {
        if (grid.rank() != 3) throw ShapeMismatchError("pixel_unshuffle: grid must be (H,W,C)");
        const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
        if (r == 0 || c % (r * r) != 0)
            throw NotDivisibleError("pixel_unshuffle: channels not divisible by r^2");
        const std::size_t ho = h * r, wo = w * r, co = c / (r * r);
        std::vector<double> out(grid.size());
        const auto& gd = grid.data();
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t dy = 0; dy < r; ++dy)
                    for (std::size_t dx = 0; dx < r; ++dx) {
                        const double* src = gd.data() + (i * w + j) * c + (dy * r + dx) * co;
                        double* dst = out.data() + ((i * r + dy) * wo + (j * r + dx)) * co;
                        std::copy_n(src, co, dst);
                    }
        auto gn = grid.node_;
        return make_output({ho, wo, co}, std::move(out), "pixel_unshuffle", {grid},
                           [gn, h, w, c, r, wo, co](const std::vector<double>& g, GradMap& grads) {
                               if (!gn->requires_grad) return;
                               auto& gg = grad_buf(grads, gn.get());
                               for (std::size_t i = 0; i < h; ++i)
                                   for (std::size_t j = 0; j < w; ++j)
                                       for (std::size_t dy = 0; dy < r; ++dy)
                                           for (std::size_t dx = 0; dx < r; ++dx) {
                                               const double* src =
                                                   g.data() + ((i * r + dy) * wo + (j * r + dx)) * co;
                                               double* dst = gg.data() + (i * w + j) * c + (dy * r + dx) * co;
                                               for (std::size_t ch = 0; ch < co; ++ch) dst[ch] += src[ch];
                                           }
                           });
    }

    // ---- backward ----

    BackwardResult backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw NotScalarError("backward: loss must be a scalar");
        const auto* ln = loss.node();
        if (ln->producer < 0 || ln->tape_id != id_)
            throw DisconnectedLossError("backward: loss was not produced by this tape");

        // Mark records reachable from the loss through requires-grad edges.
        std::vector<char> reachable(records_.size(), 0);
        std::vector<std::size_t> stack{static_cast<std::size_t>(ln->producer)};
        reachable[stack[0]] = 1;
        while (!stack.empty()) {
            const std::size_t idx = stack.back();
            stack.pop_back();
            for (const auto& in : records_[idx].inputs) {
                if (in->producer >= 0 && in->tape_id == id_) {
                    const auto p = static_cast<std::size_t>(in->producer);
                    if (!reachable[p]) {
                        reachable[p] = 1;
                        stack.push_back(p);
                    }
                }
            }
        }

        GradMap grads;
        grads.emplace(ln, std::vector<double>{1.0});
        for (std::size_t i = static_cast<std::size_t>(ln->producer) + 1; i-- > 0;) {
            if (!reachable[i] || !records_[i].backward) continue;
            auto it = grads.find(records_[i].output.get());
            if (it == grads.end()) continue;
            records_[i].backward(it->second, grads);
        }
        return BackwardResult(std::move(grads));
    }

private:
    enum class BinOp { Add, Sub, Mul };

    struct OpRecord {
        const char* op;
        std::vector<std::shared_ptr<detail::TensorNode>> inputs;
        std::shared_ptr<detail::TensorNode> output;
        std::function<void(const std::vector<double>&, GradMap&)> backward;
    };

    static std::atomic<std::uint64_t>& next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter;
    }

    static std::vector<double>& grad_buf(GradMap& grads, const detail::TensorNode* n) {
        auto it = grads.find(n);
        if (it == grads.end())
            it = grads.emplace(n, std::vector<double>(n->data.size(), 0.0)).first;
        return it->second;
    }

    static void split_coord(double coord, std::size_t extent, std::size_t& i0, std::size_t& i1,
                            double& frac) {
        const double f = coord - 0.5;
        const double fl = std::floor(f);
        frac = f - fl;
        const auto lo = static_cast<long long>(fl);
        const long long max_idx = static_cast<long long>(extent) - 1;
        i0 = static_cast<std::size_t>(std::clamp(lo, 0LL, max_idx));
        i1 = static_cast<std::size_t>(std::clamp(lo + 1, 0LL, max_idx));
    }

    static bool is_suffix(const Shape& small, const Shape& big) {
        if (small.size() > big.size()) return false;
        const std::size_t off = big.size() - small.size();
        for (std::size_t i = 0; i < small.size(); ++i)
            if (big[off + i] != small[i]) return false;
        return true;
    }

    Tensor binary(const Tensor& a, const Tensor& b, const char* name, BinOp op) {
        if (!is_suffix(b.shape(), a.shape()))
            throw ShapeMismatchError(std::string(name) + ": " + shape_str(b.shape()) +
                                     " is not a trailing suffix of " + shape_str(a.shape()));
        const std::size_t n = a.size(), bn_sz = b.size();
        std::vector<double> out(n);
        const auto& ad = a.data();
        const auto& bd = b.data();
        switch (op) {
            case BinOp::Add:
                for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i % bn_sz];
                break;
            case BinOp::Sub:
                for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i % bn_sz];
                break;
            case BinOp::Mul:
                for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % bn_sz];
                break;
        }
        auto an = a.node_, bn = b.node_;
        return make_output(a.shape(), std::move(out), name, {a, b},
                           [an, bn, op, n, bn_sz](const std::vector<double>& g, GradMap& grads) {
                               if (an->requires_grad) {
                                   auto& ga = grad_buf(grads, an.get());
                                   switch (op) {
                                       case BinOp::Add:
                                       case BinOp::Sub:
                                           for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                                           break;
                                       case BinOp::Mul:
                                           for (std::size_t i = 0; i < n; ++i)
                                               ga[i] += g[i] * bn->data[i % bn_sz];
                                           break;
                                   }
                               }
                               if (bn->requires_grad) {
                                   auto& gb = grad_buf(grads, bn.get());
                                   switch (op) {
                                       case BinOp::Add:
                                           for (std::size_t i = 0; i < n; ++i) gb[i % bn_sz] += g[i];
                                           break;
                                       case BinOp::Sub:
                                           for (std::size_t i = 0; i < n; ++i) gb[i % bn_sz] -= g[i];
                                           break;
                                       case BinOp::Mul:
                                           for (std::size_t i = 0; i < n; ++i)
                                               gb[i % bn_sz] += g[i] * an->data[i];
                                           break;
                                   }
                               }
                           });
    }

    static void matmul_raw(const double* a, const double* b, double* c, std::size_t m,
                           std::size_t k, std::size_t n);
    static void matmul_acc_bt(const double* g, const double* b, double* ga, std::size_t m,
                              std::size_t n, std::size_t k);
    static void matmul_acc_at(const double* a, const double* g, double* gb, std::size_t m,
                              std::size_t k, std::size_t n);

    Tensor make_output(Shape shape, std::vector<double> data, const char* op,
                       const std::vector<Tensor>& inputs,
                       std::function<void(const std::vector<double>&, GradMap&)> backward) {
        for (double v : data)
            if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite output value");
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        bool needs = false;
        if (grad_enabled_)
            for (const Tensor& t : inputs) needs = needs || t.requires_grad();
        node->requires_grad = needs;
        if (needs) {
            node->producer = static_cast<std::int64_t>(records_.size());
            node->tape_id = id_;
            OpRecord rec;
            rec.op = op;
            for (const Tensor& t : inputs) rec.inputs.push_back(t.node_);
            rec.output = node;
            rec.backward = std::move(backward);
            records_.push_back(std::move(rec));
        }
        return Tensor(std::move(node));
    }

    bool grad_enabled_;
    std::uint64_t id_;
    std::vector<OpRecord> records_;
};

// ---- matmul kernels (row-parallel; per-element accumulation order is fixed,
// so results are bitwise identical for any thread count) ----

inline void Tape::matmul_raw(const double* a, const double* b, double* c, std::size_t m,
                             std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double* crow = c + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            const double* brow = b + kk * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// ga(m,k) += g(m,n) * b(k,n)^T
inline void Tape::matmul_acc_bt(const double* g, const double* b, double* ga, std::size_t m,
                                std::size_t n, std::size_t k) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double* grow = g + i * n;
        double* garow = ga + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[kk] += acc;
        }
    }
}

// gb(k,n) += a(m,k)^T * g(m,n)
inline void Tape::matmul_acc_at(const double* a, const double* g, double* gb, std::size_t m,
                                std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 65536)
    for (long long kk = 0; kk < static_cast<long long>(k); ++kk) {
        const auto kx = static_cast<std::size_t>(kk);
        double* gbrow = gb + kx * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a[i * k + kx];
            const double* grow = g + i * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
}

// ---- finite-difference gradient checking ----

// rel err per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <typename F>
double grad_check_subset(F&& f, const Tensor& x, const std::vector<std::size_t>& coords,
                         double eps = 1e-5) {
    Tensor xg = x.clone(/*requires_grad=*/true);
    Tape tape;
    Tensor loss = f(tape, xg);
    if (loss.size() != 1) throw NotScalarError("grad_check: f must be scalar-valued");
    BackwardResult res = tape.backward(loss);
    Tensor analytic = res.grad(xg);

    double max_rel = 0.0;
    for (std::size_t i : coords) {
        Tensor xp = x.clone(false);
        Tensor xm = x.clone(false);
        xp.mutable_data()[i] += eps;
        xm.mutable_data()[i] -= eps;
        Tape tp(false), tm(false);
        const double fp = f(tp, xp).item();
        const double fm = f(tm, xm).item();
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic.data()[i];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

template <typename F>
double grad_check(F&& f, const Tensor& x, double eps = 1e-5) {
    std::vector<std::size_t> coords(x.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    return grad_check_subset(std::forward<F>(f), x, coords, eps);
}

}  // namespace granvit
