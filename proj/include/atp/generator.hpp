#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "atp/model.hpp"

namespace atp {

// The decision generator takes no external input: a frozen orthonormal
// (n_layers x 64) parameter feeds two transformer encoder blocks, a final
// LayerNorm, and one zero-initialized affine head per decoder layer. Each
// head emits the layer's soft decision logits of width 2*d_head + d_int,
// which Gumbel-Sigmoid sampling and straight-through rounding turn into
// binary pruning decisions.
struct GeneratorConfig {
    int n_layers = 4;
    int d_head = 16;
    int d_int = 176;
    double temperature = 0.4;
    double offset = 3.0;

    static constexpr int kWidth = 64;
    static constexpr int kHeads = 4;
    static constexpr int kFfn = 256;

    int out_width() const { return 2 * d_head + d_int; }

    void validate() const {
        if (n_layers < 1 || d_head < 1 || d_int < 1) {
            throw ContractError("generator config dimensions must be >= 1");
        }
        if (n_layers > kWidth) {
            throw ContractError("orthonormal input needs n_layers <= " + std::to_string(kWidth));
        }
        if (temperature <= 0.0) throw ContractError("generator temperature must be positive");
    }
};

struct GenEncoderBlock {
    Tensor<float> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<float> ffn_w1, ffn_b1, ffn_ln_g, ffn_ln_b, ffn_w2, ffn_b2;
};

struct Generator {
    GeneratorConfig config;
    Tensor<float> input;  // frozen, orthonormal rows
    std::array<GenEncoderBlock, 2> blocks;
    Tensor<float> final_ln_g, final_ln_b;
    std::vector<Tensor<float>> head_w;  // per decoder layer, 64 x out_width
    std::vector<Tensor<float>> head_b;

    // Everything the optimizer touches; the frozen input is excluded.
    void visit_trainable(const std::function<void(const std::string&, Tensor<float>&)>& fn) {
        for (size_t b = 0; b < blocks.size(); ++b) {
            auto& blk = blocks[b];
            std::string p = "blocks." + std::to_string(b) + ".";
            fn(p + "wq", blk.wq);
            fn(p + "bq", blk.bq);
            fn(p + "wk", blk.wk);
            fn(p + "bk", blk.bk);
            fn(p + "wv", blk.wv);
            fn(p + "bv", blk.bv);
            fn(p + "wo", blk.wo);
            fn(p + "bo", blk.bo);
            fn(p + "ffn_w1", blk.ffn_w1);
            fn(p + "ffn_b1", blk.ffn_b1);
            fn(p + "ffn_ln_g", blk.ffn_ln_g);
            fn(p + "ffn_ln_b", blk.ffn_ln_b);
            fn(p + "ffn_w2", blk.ffn_w2);
            fn(p + "ffn_b2", blk.ffn_b2);
        }
        fn("final_ln_g", final_ln_g);
        fn("final_ln_b", final_ln_b);
        for (size_t n = 0; n < head_w.size(); ++n) {
            fn("heads." + std::to_string(n) + ".w", head_w[n]);
            fn("heads." + std::to_string(n) + ".b", head_b[n]);
        }
    }
};

// Orthonormalizes the rows of a seeded Gaussian draw (modified Gram-Schmidt).
Tensor<float> orthonormal_rows(int rows, int cols, Rng& rng);

Generator init_generator(const GeneratorConfig& config, uint64_t seed);

// Eq.-level scalar: sigmoid((d_soft + g + offset) / temperature).
inline double gumbel_sigmoid(double d_soft, double g, double offset, double temperature) {
    return 1.0 / (1.0 + std::exp(-(d_soft + g + offset) / temperature));
}

// ---------------------------------------------------------------------------
// staged forms

template <typename T>
struct GenBlockVars {
    Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Var<T> ffn_w1, ffn_b1, ffn_ln_g, ffn_ln_b, ffn_w2, ffn_b2;
};

template <typename T>
struct GeneratorVars {
    GeneratorConfig config;
    Var<T> input;  // constant: frozen
    std::array<GenBlockVars<T>, 2> blocks;
    Var<T> final_ln_g, final_ln_b;
    std::vector<Var<T>> head_w, head_b;
};

template <typename T>
GeneratorVars<T> stage_generator(Tape<T>& tape, const Generator& gen, bool trainable) {
    GeneratorVars<T> gv;
    gv.config = gen.config;
    auto put = [&](const Tensor<float>& t, bool train) {
        if constexpr (std::is_same_v<T, float>) {
            return train ? tape.leaf(t, true) : tape.constant(t);
        } else {
            Tensor<T> c = t.template cast<T>();
            return train ? tape.leaf(std::move(c), true) : tape.constant(std::move(c));
        }
    };
    gv.input = put(gen.input, false);
    for (size_t b = 0; b < 2; ++b) {
        const auto& s = gen.blocks[b];
        auto& d = gv.blocks[b];
        d.wq = put(s.wq, trainable);
        d.bq = put(s.bq, trainable);
        d.wk = put(s.wk, trainable);
        d.bk = put(s.bk, trainable);
        d.wv = put(s.wv, trainable);
        d.bv = put(s.bv, trainable);
        d.wo = put(s.wo, trainable);
        d.bo = put(s.bo, trainable);
        d.ffn_w1 = put(s.ffn_w1, trainable);
        d.ffn_b1 = put(s.ffn_b1, trainable);
        d.ffn_ln_g = put(s.ffn_ln_g, trainable);
        d.ffn_ln_b = put(s.ffn_ln_b, trainable);
        d.ffn_w2 = put(s.ffn_w2, trainable);
        d.ffn_b2 = put(s.ffn_b2, trainable);
    }
    gv.final_ln_g = put(gen.final_ln_g, trainable);
    gv.final_ln_b = put(gen.final_ln_b, trainable);
    for (size_t n = 0; n < gen.head_w.size(); ++n) {
        gv.head_w.push_back(put(gen.head_w[n], trainable));
        gv.head_b.push_back(put(gen.head_b[n], trainable));
    }
    return gv;
}

namespace detail {

// Bidirectional multi-head self-attention over the layer tokens.
template <typename T>
Var<T> gen_block_forward(Tape<T>& tape, Var<T> x, const GenBlockVars<T>& blk) {
    constexpr int kHeads = GeneratorConfig::kHeads;
    int width = tape.value(x).cols();
    int hd = width / kHeads;
    Var<T> q = add_rowvec(matmul(x, blk.wq), blk.bq);
    Var<T> k = add_rowvec(matmul(x, blk.wk), blk.bk);
    Var<T> v = add_rowvec(matmul(x, blk.wv), blk.bv);
    T scl = T(1) / std::sqrt(static_cast<T>(hd));
    std::vector<Var<T>> heads;
    for (int h = 0; h < kHeads; ++h) {
        Var<T> qh = slice_cols(q, h * hd, hd);
        Var<T> kh = slice_cols(k, h * hd, hd);
        Var<T> vh = slice_cols(v, h * hd, hd);
        Var<T> probs = softmax_rows(scale(matmul(qh, transpose(kh)), scl));
        heads.push_back(matmul(probs, vh));
    }
    Var<T> attn = add_rowvec(matmul(concat_cols(heads), blk.wo), blk.bo);
    x = add(x, attn);

    Var<T> h1 = relu(add_rowvec(matmul(x, blk.ffn_w1), blk.ffn_b1));
    Var<T> h1n = layernorm(h1, blk.ffn_ln_g, blk.ffn_ln_b, T(1e-5));
    Var<T> h2 = add_rowvec(matmul(h1n, blk.ffn_w2), blk.ffn_b2);
    return add(x, h2);
}

}  // namespace detail

// Per-layer soft decision logits (each a 1 x out_width row).
template <typename T>
std::vector<Var<T>> generator_soft_rows(Tape<T>& tape, const GeneratorVars<T>& gv) {
    Var<T> x = gv.input;
    for (const auto& blk : gv.blocks) x = detail::gen_block_forward(tape, x, blk);
    x = layernorm(x, gv.final_ln_g, gv.final_ln_b, T(1e-5));
    std::vector<Var<T>> rows;
    for (int n = 0; n < gv.config.n_layers; ++n) {
        Var<T> r = slice_rows(x, n, 1);
        rows.push_back(add_rowvec(matmul(r, gv.head_w[static_cast<size_t>(n)]),
                                  gv.head_b[static_cast<size_t>(n)]));
    }
    return rows;
}

// The full n_layers x out_width soft-logit matrix (deterministic in M).
template <typename T>
Var<T> generator_soft_logits(Tape<T>& tape, const GeneratorVars<T>& gv) {
    auto rows = generator_soft_rows(tape, gv);
    std::vector<Var<T>> cols;
    for (auto r : rows) cols.push_back(transpose(r));
    return transpose(concat_cols(cols));
}

enum class EmitMode {
    Sampled,        // fresh Gumbel noise per element, hard decisions
    Deterministic,  // g = 0, hard decisions
    Soft,           // g = 0, no rounding: decisions stay in (0,1)
};

template <typename T>
struct Emission {
    DecisionVars<T> vars;  // on-tape decision vectors per layer
    DecisionSet hard;      // thresholded binary view of the same values
};

// soft_logits -> gumbel-sigmoid -> straight-through rounding -> partition
// into (d_qk, d_v, d_gu). Gumbel noise is consumed layer by layer, element
// by element, from the provided stream.
template <typename T>
Emission<T> emit_decisions_on_tape(Tape<T>& tape, const GeneratorVars<T>& gv, EmitMode mode,
                                   Rng* gumbel_rng = nullptr) {
    const GeneratorConfig& cfg = gv.config;
    if (mode == EmitMode::Sampled && gumbel_rng == nullptr) {
        throw ContractError("sampled emission needs a gumbel stream");
    }
    auto rows = generator_soft_rows(tape, gv);
    Emission<T> out;
    out.hard.layers.resize(static_cast<size_t>(cfg.n_layers));
    T inv_temp = T(1) / static_cast<T>(cfg.temperature);
    for (int n = 0; n < cfg.n_layers; ++n) {
        Var<T> logits = rows[static_cast<size_t>(n)];
        Tensor<T> shift({1, cfg.out_width()});
        for (auto& v : shift.data) {
            double g = mode == EmitMode::Sampled ? gumbel_rng->gumbel() : 0.0;
            v = static_cast<T>(g + cfg.offset);
        }
        Var<T> soft = sigmoid(scale(add(logits, tape.constant(shift)), inv_temp));
        Var<T> dec = mode == EmitMode::Soft ? soft : ste_round(soft);
        Var<T> flat = reshape(dec, {cfg.out_width()});

        LayerDecisionVars<T> lv;
        lv.d_qk = slice_vec(flat, 0, cfg.d_head);
        lv.d_v = slice_vec(flat, cfg.d_head, cfg.d_head);
        lv.d_gu = slice_vec(flat, 2 * cfg.d_head, cfg.d_int);
        out.vars.layers.push_back(lv);

        auto& hl = out.hard.layers[static_cast<size_t>(n)];
        const auto& vals = tape.value(dec).data;
        hl.d_qk.resize(static_cast<size_t>(cfg.d_head));
        hl.d_v.resize(static_cast<size_t>(cfg.d_head));
        hl.d_gu.resize(static_cast<size_t>(cfg.d_int));
        for (int j = 0; j < cfg.d_head; ++j) hl.d_qk[static_cast<size_t>(j)] = vals[static_cast<size_t>(j)] >= T(0.5);
        for (int j = 0; j < cfg.d_head; ++j) {
            hl.d_v[static_cast<size_t>(j)] = vals[static_cast<size_t>(cfg.d_head + j)] >= T(0.5);
        }
        for (int j = 0; j < cfg.d_int; ++j) {
            hl.d_gu[static_cast<size_t>(j)] = vals[static_cast<size_t>(2 * cfg.d_head + j)] >= T(0.5);
        }
    }
    return out;
}

// Convenience: emission without keeping the tape around.
DecisionSet emit_decisions(const Generator& gen, bool sampled, Rng* gumbel_rng = nullptr);

}  // namespace atp
