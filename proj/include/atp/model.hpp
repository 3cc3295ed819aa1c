#pragma once

#include <string>
#include <vector>

#include "atp/autograd.hpp"
#include "atp/decisions.hpp"
#include "atp/rng.hpp"

namespace atp {

// Which forward the prunable projections run:
//   Dense      - no masking; adapters merged in if present
//   MaskedAll  - X (W + Wa Wb) D: base and adapter both masked
//                (decision search and evaluation/export)
//   MaskedBase - X (W D + Wa Wb): base masked, adapter free so gradient
//                still reaches tentatively pruned dimensions (tuning)
enum class ForwardMode { Dense, MaskedAll, MaskedBase };

struct ModelConfig {
    int n_layers = 4;
    int d_hidden = 64;
    int n_heads = 4;
    int d_int = 176;
    int vocab = 259;
    int seq_max = 128;
    double norm_eps = 1e-5;

    int d_head() const { return d_hidden / n_heads; }

    void validate() const {
        if (n_layers < 1 || d_hidden < 1 || n_heads < 1 || d_int < 1 || vocab < 1 || seq_max < 1) {
            throw ContractError("model config dimensions must be >= 1");
        }
        if (d_hidden % n_heads != 0) {
            throw ContractError("d_hidden " + std::to_string(d_hidden) +
                                " not divisible by n_heads " + std::to_string(n_heads));
        }
    }
};

// Actual widths of one layer's projections. A dense model has uniform widths
// from the config; a compacted model carries whatever survived pruning.
struct LayerShape {
    int k_qk = 0;  // per-head query/key width
    int k_v = 0;   // per-head value width
    int k_gu = 0;  // MLP intermediate width
};

// One decoder layer. W_Q/W_K are d_hidden x (H * k_qk) with head i owning the
// contiguous column block [i*k_qk, (i+1)*k_qk); W_V likewise with k_v. W_O is
// (H * k_v) x d_hidden and W_D is k_gu x d_hidden: their output widths stay
// d_hidden so residual connections keep their dimension.
struct DecoderLayer {
    Tensor<float> wq, wk, wv, wo;
    Tensor<float> wg, wu, wd;
    Tensor<float> norm_attn, norm_mlp;
    LayerShape shape;
};

struct Model {
    ModelConfig config;
    std::vector<DecoderLayer> layers;
    Tensor<float> tok_emb;     // vocab x d_hidden
    Tensor<float> pos_emb;     // seq_max x d_hidden
    Tensor<float> final_norm;  // d_hidden
    Tensor<float> unembed;     // d_hidden x vocab

    bool is_compact() const;
    int64_t decoder_param_count() const;

    void visit_params(const std::function<void(const std::string&, Tensor<float>&)>& fn);
};

Model init_model(const ModelConfig& config, uint64_t seed);

// Number of decoder-layer parameters that survive the given decisions,
// counting Q,K through k_qk, V,O through k_v, gate/up/down through k_gu, and
// the two always-kept norm vectors per layer.
int64_t count_remaining(const ModelConfig& config, const DecisionSet& decisions);
int64_t total_decoder_params(const ModelConfig& config);

// ---------------------------------------------------------------------------
// staged (on-tape) forms

template <typename T>
struct LayerVars {
    Var<T> wq, wk, wv, wo, wg, wu, wd, norm_attn, norm_mlp;
    LayerShape shape;
};

template <typename T>
struct ModelVars {
    ModelConfig config;
    std::vector<LayerVars<T>> layers;
    Var<T> tok_emb, pos_emb, final_norm, unembed;
};

template <typename T>
struct LayerDecisionVars {
    Var<T> d_qk, d_v, d_gu;  // 1-D vars; invalid() means identity (dense)
};

template <typename T>
struct DecisionVars {
    std::vector<LayerDecisionVars<T>> layers;
};

// Adapter hooks the model forward consumes; provided by the adapters module.
template <typename T>
struct LayerAdapterVars;

template <typename T>
ModelVars<T> stage_model(Tape<T>& tape, const Model& model, bool trainable) {
    ModelVars<T> mv;
    mv.config = model.config;
    auto put = [&](const Tensor<float>& t) {
        if constexpr (std::is_same_v<T, float>) {
            return trainable ? tape.leaf(t, true) : tape.constant(t);
        } else {
            Tensor<T> c = t.template cast<T>();
            return trainable ? tape.leaf(std::move(c), true) : tape.constant(std::move(c));
        }
    };
    for (const auto& l : model.layers) {
        LayerVars<T> lv;
        lv.wq = put(l.wq);
        lv.wk = put(l.wk);
        lv.wv = put(l.wv);
        lv.wo = put(l.wo);
        lv.wg = put(l.wg);
        lv.wu = put(l.wu);
        lv.wd = put(l.wd);
        lv.norm_attn = put(l.norm_attn);
        lv.norm_mlp = put(l.norm_mlp);
        lv.shape = l.shape;
        mv.layers.push_back(lv);
    }
    mv.tok_emb = put(model.tok_emb);
    mv.pos_emb = put(model.pos_emb);
    mv.final_norm = put(model.final_norm);
    mv.unembed = put(model.unembed);
    return mv;
}

template <typename T>
DecisionVars<T> stage_decisions(Tape<T>& tape, const DecisionSet& set) {
    set.validate();
    DecisionVars<T> dv;
    auto vec = [&](const std::vector<uint8_t>& bits) {
        Tensor<T> t({static_cast<int>(bits.size())});
        for (size_t i = 0; i < bits.size(); ++i) t.data[i] = static_cast<T>(bits[i]);
        return tape.constant(std::move(t));
    };
    for (const auto& l : set.layers) {
        dv.layers.push_back({vec(l.d_qk), vec(l.d_v), vec(l.d_gu)});
    }
    return dv;
}

}  // namespace atp

#include "atp/adapters.hpp"

namespace atp {

namespace detail {

// Mask vector for a full-width projection: per-head decision tiled H times,
// or the raw vector for MLP projections. Invalid var means identity.
template <typename T>
Var<T> tile_heads(Var<T> d, int n_heads) {
    std::vector<Var<T>> parts(static_cast<size_t>(n_heads), d);
    return concat_vec(parts);
}

template <typename T>
int mask_popcount(Tape<T>& tape, Var<T> d) {
    const auto& v = tape.value(d).data;
    int n = 0;
    for (T x : v) n += x >= T(0.5) ? 1 : 0;
    return n;
}

}  // namespace detail

// One prunable projection: x w (+ x wa wb per mode), columns masked per mode.
// out_mask invalid => identity (the W_O / W_D residual-facing outputs).
template <typename T>
Var<T> project(Tape<T>& tape, Var<T> x, Var<T> w, const LoraVars<T>* lora, Var<T> out_mask,
               ForwardMode mode) {
    Var<T> base = matmul(x, w);
    Var<T> adapter;
    if (lora != nullptr) adapter = matmul(matmul(x, lora->wa), lora->wb);
    switch (mode) {
        case ForwardMode::Dense:
            return lora ? add(base, adapter) : base;
        case ForwardMode::MaskedAll: {
            Var<T> merged = lora ? add(base, adapter) : base;
            return out_mask.valid() ? colwise_mul(merged, out_mask) : merged;
        }
        case ForwardMode::MaskedBase: {
            Var<T> masked = out_mask.valid() ? colwise_mul(base, out_mask) : base;
            return lora ? add(masked, adapter) : masked;
        }
    }
    throw ContractError("unreachable forward mode");
}

// MLP block: (silu(x wg dgu) * (x wu dgu)) wd. W_D's own output is never
// masked; its input rows are pruned indirectly because the masked
// intermediate activations are zero there.
template <typename T>
Var<T> mlp_forward(Tape<T>& tape, Var<T> x, const LayerVars<T>& layer,
                   const LayerAdapterVars<T>* adapters, Var<T> d_gu, ForwardMode mode) {
    if (d_gu.valid() &&
        tape.value(d_gu).shape[0] != tape.value(layer.wg).cols()) {
        throw ShapeError("mlp decision width " +
                         std::to_string(tape.value(d_gu).shape[0]) + " vs intermediate " +
                         std::to_string(tape.value(layer.wg).cols()));
    }
    const LoraVars<T>* la_g = adapters ? &adapters->gate : nullptr;
    const LoraVars<T>* la_u = adapters ? &adapters->up : nullptr;
    const LoraVars<T>* la_d = adapters ? &adapters->down : nullptr;
    Var<T> gate = project(tape, x, layer.wg, la_g, d_gu, mode);
    Var<T> up = project(tape, x, layer.wu, la_u, d_gu, mode);
    Var<T> h = mul(silu(gate), up);
    return project(tape, h, layer.wd, la_d, Var<T>{}, mode);
}

// Causal multi-head attention with per-head masking of query/key and value
// widths. Scores scale by 1/sqrt(popcount(d_qk)); a fully pruned head
// degenerates to uniform attention over the causal window.
template <typename T>
Var<T> attn_forward(Tape<T>& tape, Var<T> x, const LayerVars<T>& layer,
                    const LayerAdapterVars<T>* adapters, Var<T> d_qk, Var<T> d_v,
                    ForwardMode mode, int n_heads, const Tensor<uint8_t>& causal) {
    const LoraVars<T>* la_q = adapters ? &adapters->q : nullptr;
    const LoraVars<T>* la_k = adapters ? &adapters->k : nullptr;
    const LoraVars<T>* la_v = adapters ? &adapters->v : nullptr;
    const LoraVars<T>* la_o = adapters ? &adapters->o : nullptr;

    int w_qk = tape.value(layer.wq).cols();
    int w_v = tape.value(layer.wv).cols();
    if (w_qk % n_heads != 0 || w_v % n_heads != 0) {
        throw ShapeError("projection widths not divisible by head count");
    }
    int hd_qk = w_qk / n_heads, hd_v = w_v / n_heads;
    if (d_qk.valid() && tape.value(d_qk).shape[0] != hd_qk) {
        throw ShapeError("attention decision width " +
                         std::to_string(tape.value(d_qk).shape[0]) + " vs head width " +
                         std::to_string(hd_qk));
    }

    Var<T> qk_mask, v_mask;
    int kept_qk = hd_qk;
    if (d_qk.valid()) {
        qk_mask = detail::tile_heads(d_qk, n_heads);
        kept_qk = detail::mask_popcount(tape, d_qk);
    }
    if (d_v.valid()) v_mask = detail::tile_heads(d_v, n_heads);
    if (mode == ForwardMode::Dense) {
        qk_mask = Var<T>{};
        v_mask = Var<T>{};
        kept_qk = hd_qk;
    }

    Var<T> q = project(tape, x, layer.wq, la_q, qk_mask, mode);
    Var<T> k = project(tape, x, layer.wk, la_k, qk_mask, mode);
    Var<T> v = project(tape, x, layer.wv, la_v, v_mask, mode);

    // During tuning the base is masked but adapters leak through pruned
    // dimensions, so the score scale still uses the decided width.
    T scl = kept_qk > 0 ? T(1) / std::sqrt(static_cast<T>(kept_qk)) : T(0);

    std::vector<Var<T>> heads;
    heads.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Var<T> qh = slice_cols(q, h * hd_qk, hd_qk);
        Var<T> kh = slice_cols(k, h * hd_qk, hd_qk);
        Var<T> vh = slice_cols(v, h * hd_v, hd_v);
        Var<T> scores = scale(matmul(qh, transpose(kh)), scl);
        Var<T> probs = softmax_rows(scores, &causal);
        heads.push_back(matmul(probs, vh));
    }
    Var<T> joined = concat_cols(heads);
    return project(tape, joined, layer.wo, la_o, Var<T>{}, mode);
}

template <typename T>
Tensor<uint8_t> causal_mask(int seq_len) {
    Tensor<uint8_t> m({seq_len, seq_len});
    for (int i = 0; i < seq_len; ++i) {
        for (int j = 0; j <= i; ++j) m.at(i, j) = 1;
    }
    return m;
}

template <typename T>
struct ModelAdapterVars;

// Full forward for one token sequence: embeddings, pre-norm decoder layers
// with residual adds, final norm, unembedding. Returns seq_len x vocab logits.
template <typename T>
Var<T> model_forward(Tape<T>& tape, const ModelVars<T>& model,
                     const ModelAdapterVars<T>* adapters, const DecisionVars<T>* decisions,
                     ForwardMode mode, const std::vector<int>& tokens) {
    const ModelConfig& cfg = model.config;
    int n = static_cast<int>(tokens.size());
    if (n == 0) throw InputError("empty token sequence");
    if (n > cfg.seq_max) {
        throw InputError("sequence length " + std::to_string(n) + " exceeds max " +
                         std::to_string(cfg.seq_max));
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab) throw InputError("token id " + std::to_string(t) +
                                                      " outside vocabulary");
    }
    if (mode != ForwardMode::Dense && decisions != nullptr &&
        static_cast<int>(decisions->layers.size()) != static_cast<int>(model.layers.size())) {
        throw ShapeError("decision set covers " + std::to_string(decisions->layers.size()) +
                         " layers, model has " + std::to_string(model.layers.size()));
    }

    std::vector<int> positions(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
    Var<T> x = add(gather_rows(model.tok_emb, tokens), gather_rows(model.pos_emb, positions));

    Tensor<uint8_t> causal = causal_mask<T>(n);
    for (size_t li = 0; li < model.layers.size(); ++li) {
        const LayerVars<T>& layer = model.layers[li];
        const LayerAdapterVars<T>* la =
            adapters ? &adapters->layers[li] : nullptr;
        Var<T> d_qk, d_v, d_gu;
        if (mode != ForwardMode::Dense && decisions != nullptr) {
            d_qk = decisions->layers[li].d_qk;
            d_v = decisions->layers[li].d_v;
            d_gu = decisions->layers[li].d_gu;
        }
        Var<T> h = rmsnorm(x, layer.norm_attn, static_cast<T>(cfg.norm_eps));
        x = add(x, attn_forward(tape, h, layer, la, d_qk, d_v, mode, cfg.n_heads, causal));
        Var<T> h2 = rmsnorm(x, layer.norm_mlp, static_cast<T>(cfg.norm_eps));
        x = add(x, mlp_forward(tape, h2, layer, la, d_gu, mode));
    }
    Var<T> xn = rmsnorm(x, model.final_norm, static_cast<T>(cfg.norm_eps));
    return matmul(xn, model.unembed);
}

// Mean next-token cross-entropy: position t predicts token t+1.
template <typename T>
Var<T> lm_loss(Tape<T>& tape, Var<T> logits, const std::vector<int>& tokens) {
    if (tokens.size() < 2) throw ContractError("lm_loss needs at least 2 tokens");
    int n = static_cast<int>(tokens.size());
    if (tape.value(logits).rows() != n) {
        throw ShapeError("lm_loss: " + std::to_string(tape.value(logits).rows()) +
                         " logit rows for " + std::to_string(n) + " tokens");
    }
    Var<T> pred = slice_rows(logits, 0, n - 1);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    return cross_entropy_mean(pred, targets);
}

// Batch loss: mean of per-sequence losses (sequences share a length).
template <typename T>
Var<T> lm_loss_batch(Tape<T>& tape, const ModelVars<T>& model,
                     const ModelAdapterVars<T>* adapters, const DecisionVars<T>* decisions,
                     ForwardMode mode, const std::vector<std::vector<int>>& batch) {
    if (batch.empty()) throw ContractError("empty batch");
    Var<T> total;
    for (const auto& seq : batch) {
        Var<T> logits = model_forward(tape, model, adapters, decisions, mode, seq);
        Var<T> loss = lm_loss(tape, logits, seq);
        total = total.valid() ? add(total, loss) : loss;
    }
    return scale(total, T(1) / static_cast<T>(batch.size()));
}

}  // namespace atp
