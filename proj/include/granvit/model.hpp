#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "granvit/errors.hpp"
#include "granvit/image.hpp"
#include "granvit/params.hpp"
#include "granvit/rng.hpp"
#include "granvit/tape.hpp"
#include "granvit/tensor.hpp"
#include "granvit/tokenizer.hpp"

namespace granvit {

struct VLMConfig {
    std::size_t img_px = 64;
    std::size_t patch_px = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    std::size_t ffn_mult = 4;
    std::size_t vocab = tok::kVocab;
    std::size_t max_seq = 256;
    std::size_t pixel_shuffle_r = 1;  // 1 = off
    std::size_t tile_px = 0;          // 0 = off
    // Weight init scale. The frozen decoder stands in for a pretrained LM in
    // stage 1, so it needs enough scale for content-dependent attention
    // routing at init; 0.25 calibrated on the synthetic corpus (small scales
    // plateau, 0.35 is already too saturated to train through).
    double init_std = 0.25;

    std::size_t grid_side() const { return img_px / patch_px; }
    std::size_t n_vis() const {
        const std::size_t g = grid_side() / pixel_shuffle_r;
        return g * g;
    }
    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (img_px == 0 || patch_px == 0 || img_px % patch_px != 0)
            throw ConfigError("VLMConfig: img_px must be a positive multiple of patch_px");
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("VLMConfig: d_model must be a positive multiple of n_heads");
        if (pixel_shuffle_r == 0 || grid_side() % pixel_shuffle_r != 0)
            throw ConfigError("VLMConfig: grid side must be divisible by pixel_shuffle_r");
        if (vocab < 260) throw ConfigError("VLMConfig: vocab must cover bytes plus specials");
        if (max_seq < n_vis() + 4) throw ConfigError("VLMConfig: max_seq too small for the visual prefix");
    }
};

// Token ids plus the answer-region loss mask.
struct TokenSequence {
    std::vector<int> ids;
    std::vector<int> loss_mask;  // 1 exactly on answer bytes and EOS
    std::size_t n_vis = 0;       // IMG placeholder count

    std::size_t length() const { return ids.size(); }
};

struct TileSet {
    std::vector<Tensor> tiles;  // raster order
    std::size_t nx = 0, ny = 0;
    Tensor global;
};

// Raster-order non-overlapping tiles plus a whole-image resize as the global
// tile; the padded canvas grows with zeros when tile_px does not divide it.
inline TileSet tile_image(const Tensor& image, std::size_t tile_px) {
    if (image.rank() != 3) throw ShapeMismatchError("tile_image: image must be (H,W,C)");
    if (tile_px == 0) throw ConfigError("tile_image: tile_px must be positive");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    const std::size_t ph = (h + tile_px - 1) / tile_px * tile_px;
    const std::size_t pw = (w + tile_px - 1) / tile_px * tile_px;
    Tensor padded = image;
    if (ph != h || pw != w) {
        padded = Tensor::zeros({ph, pw, c});
        for (std::size_t i = 0; i < h; ++i)
            std::copy_n(image.data().data() + i * w * c, w * c,
                        padded.mutable_data().data() + i * pw * c);
    }
    TileSet out;
    out.ny = ph / tile_px;
    out.nx = pw / tile_px;
    for (std::size_t ty = 0; ty < out.ny; ++ty)
        for (std::size_t tx = 0; tx < out.nx; ++tx) {
            Tensor tile = Tensor::zeros({tile_px, tile_px, c});
            for (std::size_t i = 0; i < tile_px; ++i)
                std::copy_n(padded.data().data() + ((ty * tile_px + i) * pw + tx * tile_px) * c,
                            tile_px * c, tile.mutable_data().data() + i * tile_px * c);
            out.tiles.push_back(std::move(tile));
        }
    out.global = resize_bilinear(image, tile_px, tile_px);
    return out;
}

// Position-aware inverse of per-tile feature extraction: places (G,G,C)
// feature grids back on the (ny*G, nx*G, C) canvas in raster order.
inline Tensor reassemble_tiles(const std::vector<Tensor>& features, std::size_t nx, std::size_t ny) {
    if (features.size() != nx * ny) throw ShapeMismatchError("reassemble_tiles: tile count mismatch");
    const std::size_t g = features.at(0).dim(0), c = features.at(0).dim(2);
    Tensor out = Tensor::zeros({ny * g, nx * g, c});
    for (std::size_t ty = 0; ty < ny; ++ty)
        for (std::size_t tx = 0; tx < nx; ++tx) {
            const Tensor& f = features[ty * nx + tx];
            if (f.shape() != Shape{g, g, c}) throw ShapeMismatchError("reassemble_tiles: grid shape mismatch");
            for (std::size_t i = 0; i < g; ++i)
                std::copy_n(f.data().data() + i * g * c, g * c,
                            out.mutable_data().data() + ((ty * g + i) * nx * g + tx * g) * c);
        }
    return out;
}

// Raster patch extraction: (S,S,C) -> (G*G, P*P*C). Pure data movement;
// images carry no gradient.
inline Tensor patchify(const Tensor& image, std::size_t patch_px) {
    const std::size_t s = image.dim(0), c = image.dim(2);
    const std::size_t g = s / patch_px;
    Tensor out = Tensor::zeros({g * g, patch_px * patch_px * c});
    for (std::size_t py = 0; py < g; ++py)
        for (std::size_t px = 0; px < g; ++px) {
            double* dst = out.mutable_data().data() + (py * g + px) * patch_px * patch_px * c;
            for (std::size_t i = 0; i < patch_px; ++i)
                std::copy_n(image.data().data() + ((py * patch_px + i) * s + px * patch_px) * c,
                            patch_px * c, dst + i * patch_px * c);
        }
    return out;
}

// The miniature GranViT stack: patch ViT encoder, two-layer MLP projector,
// byte-level causal decoder. Parameters are partitioned by name prefix into
// encoder.* / projector.* / decoder.*.
class ToyVLM {
public:
    ToyVLM(VLMConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        init_params(seed);
    }

    // Reconstructs around externally loaded parameters (checkpoint path).
    ToyVLM(VLMConfig cfg, ParameterSet params) : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
    }

    const VLMConfig& cfg() const { return cfg_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    // ---- vision ----

    Tensor encode(Tape& tape, const Tensor& image) const { return encode_with(tape, params_, image); }

    // Shared by the student and the EMA teacher (same names, different set).
    Tensor encode_with(Tape& tape, const ParameterSet& p, const Tensor& image) const {
        if (image.rank() != 3 || image.dim(0) != cfg_.img_px || image.dim(1) != cfg_.img_px ||
            image.dim(2) != 3)
            throw ShapeMismatchError("encode: expected (" + std::to_string(cfg_.img_px) + "," +
                                     std::to_string(cfg_.img_px) + ",3), got " + shape_str(image.shape()));
        const std::size_t g = cfg_.grid_side();
        Tensor x = tape.matmul(patchify(image, cfg_.patch_px), p.tensor("encoder.patch_embed.weight"));
        x = tape.add(x, p.tensor("encoder.patch_embed.bias"));
        x = tape.add(x, p.tensor("encoder.pos_embed"));
        for (std::size_t l = 0; l < cfg_.enc_layers; ++l)
            x = block(tape, p, "encoder.block" + std::to_string(l) + ".", x, /*causal=*/false);
        x = tape.layer_norm(x, p.tensor("encoder.ln_f.gain"), p.tensor("encoder.ln_f.bias"));
        return tape.reshape(x, {g, g, cfg_.d_model});
    }

    // Per-token 2-layer MLP; applies pixel shuffle first when configured.
    Tensor project(Tape& tape, const Tensor& grid) const {
        Tensor x = grid;
        if (cfg_.pixel_shuffle_r > 1) x = tape.pixel_shuffle(x, cfg_.pixel_shuffle_r);
        const std::size_t tokens = x.dim(0) * x.dim(1);
        x = tape.reshape(x, {tokens, x.dim(2)});
        x = tape.add(tape.matmul(x, params_.tensor("projector.w1")), params_.tensor("projector.b1"));
        x = tape.gelu(x);
        x = tape.add(tape.matmul(x, params_.tensor("projector.w2")), params_.tensor("projector.b2"));
        return x;
    }

    Tensor encode_project(Tape& tape, const Tensor& image) const {
        return project(tape, encode(tape, image));
    }

    // ---- prompt assembly ----

    // [BOS] [IMG]*n_vis question-bytes [answer-bytes EOS]; the loss mask is 1
    // exactly on answer bytes and EOS.
    TokenSequence build_sequence(const std::string& question,
                                 const std::optional<std::string>& answer) const {
        TokenSequence seq;
        seq.n_vis = cfg_.n_vis();
        seq.ids.push_back(tok::kBos);
        for (std::size_t i = 0; i < seq.n_vis; ++i) seq.ids.push_back(tok::kImg);
        for (int id : tok::tokenize(question)) seq.ids.push_back(id);
        seq.loss_mask.assign(seq.ids.size(), 0);
        if (answer) {
            for (int id : tok::tokenize(*answer)) {
                seq.ids.push_back(id);
                seq.loss_mask.push_back(1);
            }
            seq.ids.push_back(tok::kEos);
            seq.loss_mask.push_back(1);
        }
        if (seq.ids.size() > cfg_.max_seq)
            throw TooLongError("build_sequence: " + std::to_string(seq.ids.size()) + " tokens > max_seq " +
                               std::to_string(cfg_.max_seq));
        return seq;
    }

    // Token embeddings with the IMG span replaced by visual embeddings.
    Tensor embed_sequence(Tape& tape, const TokenSequence& seq, const Tensor& visual) const {
        if (visual.rank() != 2 || visual.dim(0) != seq.n_vis || visual.dim(1) != cfg_.d_model)
            throw ShapeMismatchError("embed_sequence: visual embeddings must be (n_vis, d_model)");
        Tensor tok_emb = tape.embedding(params_.tensor("decoder.tok_embed"), seq.ids);
        const std::size_t t = seq.ids.size();
        if (seq.n_vis > 0) {
            Tensor head = tape.slice(tok_emb, 0, 0, 1);
            Tensor tail = tape.slice(tok_emb, 0, 1 + seq.n_vis, t - 1 - seq.n_vis);
            tok_emb = tape.concat({head, visual, tail}, 0);
        }
        return tape.add(tok_emb, tape.slice(params_.tensor("decoder.pos_embed"), 0, 0, t));
    }

    // ---- decoding ----

    Tensor decode_logits(Tape& tape, const TokenSequence& seq, const Tensor& visual) const {
        Tensor x = embed_sequence(tape, seq, visual);
        for (std::size_t l = 0; l < cfg_.dec_layers; ++l)
            x = block(tape, params_, "decoder.block" + std::to_string(l) + ".", x, /*causal=*/true);
        x = tape.layer_norm(x, params_.tensor("decoder.ln_f.gain"), params_.tensor("decoder.ln_f.bias"));
        return tape.matmul(x, params_.tensor("decoder.head.weight"));
    }

    // Mean next-token cross entropy over masked (answer) positions.
    Tensor decode_loss(Tape& tape, const TokenSequence& seq, const Tensor& visual) const {
        const std::size_t t = seq.ids.size();
        std::vector<int> targets(t, 0), mask(t, 0);
        for (std::size_t i = 0; i + 1 < t; ++i) {
            targets[i] = seq.ids[i + 1];
            mask[i] = seq.loss_mask[i + 1];
        }
        Tensor logits = decode_logits(tape, seq, visual);
        return tape.cross_entropy(logits, targets, mask);
    }

    // Argmax decoding until EOS or max_new tokens; deterministic; returns
    // detokenized bytes (specials dropped).
    std::string generate_greedy(const Tensor& visual, const std::string& question,
                                std::size_t max_new) const {
        TokenSequence seq = build_sequence(question, std::nullopt);
        if (seq.ids.size() + max_new > cfg_.max_seq)
            throw TooLongError("generate_greedy: prompt does not fit max_seq - max_new");
        std::vector<int> generated;
        for (std::size_t step = 0; step < max_new; ++step) {
            Tape tape(false);
            Tensor logits = decode_logits(tape, seq, visual);
            const std::size_t t = seq.ids.size();
            const double* row = logits.data().data() + (t - 1) * cfg_.vocab;
            int best = 0;
            for (std::size_t j = 1; j < cfg_.vocab; ++j)
                if (row[j] > row[best]) best = static_cast<int>(j);
            if (best == tok::kEos) break;
            generated.push_back(best);
            seq.ids.push_back(best);
            seq.loss_mask.push_back(0);
        }
        return tok::detokenize(generated);
    }

private:
    // Pre-norm transformer block; additive -1e9 mask enforces causality
    // (exactly: exp underflows to zero under max-subtraction).
    Tensor block(Tape& tape, const ParameterSet& p, const std::string& prefix, const Tensor& x,
                 bool causal) const {
        const std::size_t t = x.dim(0), dh = cfg_.head_dim();
        Tensor h = tape.layer_norm(x, p.tensor(prefix + "ln1.gain"), p.tensor(prefix + "ln1.bias"));
        Tensor q = tape.matmul(h, p.tensor(prefix + "attn.wq"));
        Tensor k = tape.matmul(h, p.tensor(prefix + "attn.wk"));
        Tensor v = tape.matmul(h, p.tensor(prefix + "attn.wv"));

        Tensor mask;
        if (causal) {
            std::vector<double> m(t * t, 0.0);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
            mask = Tensor::from_data({t, t}, std::move(m));
        }

        std::vector<Tensor> heads;
        heads.reserve(cfg_.n_heads);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (std::size_t hh = 0; hh < cfg_.n_heads; ++hh) {
            Tensor qh = tape.slice(q, 1, hh * dh, dh);
            Tensor kh = tape.slice(k, 1, hh * dh, dh);
            Tensor vh = tape.slice(v, 1, hh * dh, dh);
            Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
            if (causal) scores = tape.add(scores, mask);
            heads.push_back(tape.matmul(tape.softmax(scores), vh));
        }
        Tensor attn = tape.matmul(tape.concat(heads, 1), p.tensor(prefix + "attn.wo"));
        Tensor mid = tape.add(x, attn);

        Tensor h2 = tape.layer_norm(mid, p.tensor(prefix + "ln2.gain"), p.tensor(prefix + "ln2.bias"));
        Tensor m1 = tape.gelu(tape.add(tape.matmul(h2, p.tensor(prefix + "mlp.w1")),
                                       p.tensor(prefix + "mlp.b1")));
        Tensor m2 = tape.add(tape.matmul(m1, p.tensor(prefix + "mlp.w2")), p.tensor(prefix + "mlp.b2"));
        return tape.add(mid, m2);
    }

    void add_block_params(const std::string& prefix) {
        const std::size_t d = cfg_.d_model, f = cfg_.ffn_mult * cfg_.d_model;
        add_normal(prefix + "attn.wq", {d, d});
        add_normal(prefix + "attn.wk", {d, d});
        add_normal(prefix + "attn.wv", {d, d});
        add_normal(prefix + "attn.wo", {d, d});
        add_ln(prefix + "ln1.");
        add_ln(prefix + "ln2.");
        add_normal(prefix + "mlp.w1", {d, f});
        params_.add(prefix + "mlp.b1", Tensor::zeros({f}, true), /*decay_exempt=*/true);
        add_normal(prefix + "mlp.w2", {f, d});
        params_.add(prefix + "mlp.b2", Tensor::zeros({d}, true), /*decay_exempt=*/true);
    }

    void add_normal(const std::string& name, Shape shape, double scale_mult = 1.0) {
        Rng rng(mix_seed(seed_, fnv1a64(name)));
        params_.add(name, Tensor::randn(std::move(shape), rng, cfg_.init_std * scale_mult, true));
    }

    void add_ln(const std::string& prefix) {
        params_.add(prefix + "gain", Tensor::full({cfg_.d_model}, 1.0, true), /*decay_exempt=*/true);
        params_.add(prefix + "bias", Tensor::zeros({cfg_.d_model}, true), /*decay_exempt=*/true);
    }

    void init_params(std::uint64_t seed) {
        seed_ = seed;
        const std::size_t d = cfg_.d_model, g = cfg_.grid_side();
        const std::size_t patch_dim = cfg_.patch_px * cfg_.patch_px * 3;

        add_normal("encoder.patch_embed.weight", {patch_dim, d});
        params_.add("encoder.patch_embed.bias", Tensor::zeros({d}, true), true);
        // Loud positional codes: grid cells must stay separable through the
        // frozen decoder's attention for box-conditioned routing.
        add_normal("encoder.pos_embed", {g * g, d}, 4.0);
        for (std::size_t l = 0; l < cfg_.enc_layers; ++l)
            add_block_params("encoder.block" + std::to_string(l) + ".");
        add_ln("encoder.ln_f.");

        const std::size_t r = cfg_.pixel_shuffle_r;
        const std::size_t proj_in = d * r * r;
        add_normal("projector.w1", {proj_in, cfg_.ffn_mult * d});
        params_.add("projector.b1", Tensor::zeros({cfg_.ffn_mult * d}, true), true);
        add_normal("projector.w2", {cfg_.ffn_mult * d, d});
        params_.add("projector.b2", Tensor::zeros({d}, true), true);

        add_normal("decoder.tok_embed", {cfg_.vocab, d});
        add_normal("decoder.pos_embed", {cfg_.max_seq, d});
        for (std::size_t l = 0; l < cfg_.dec_layers; ++l)
            add_block_params("decoder.block" + std::to_string(l) + ".");
        add_ln("decoder.ln_f.");
        add_normal("decoder.head.weight", {d, cfg_.vocab});
    }

    VLMConfig cfg_;
    ParameterSet params_;
    std::uint64_t seed_ = 0;
};

}  // namespace granvit
