#include "atp/model.hpp"

namespace atp {

bool Model::is_compact() const {
    for (const auto& l : layers) {
        if (l.shape.k_qk != config.d_head() || l.shape.k_v != config.d_head() ||
            l.shape.k_gu != config.d_int) {
            return true;
        }
    }
    return false;
}

int64_t Model::decoder_param_count() const {
    int64_t n = 0;
    for (const auto& l : layers) {
        n += l.wq.numel() + l.wk.numel() + l.wv.numel() + l.wo.numel();
        n += l.wg.numel() + l.wu.numel() + l.wd.numel();
        n += l.norm_attn.numel() + l.norm_mlp.numel();
    }
    return n;
}

void Model::visit_params(const std::function<void(const std::string&, Tensor<float>&)>& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        std::string p = "layers." + std::to_string(i) + ".";
        fn(p + "wq", l.wq);
        fn(p + "wk", l.wk);
        fn(p + "wv", l.wv);
        fn(p + "wo", l.wo);
        fn(p + "wg", l.wg);
        fn(p + "wu", l.wu);
        fn(p + "wd", l.wd);
        fn(p + "norm_attn", l.norm_attn);
        fn(p + "norm_mlp", l.norm_mlp);
    }
    fn("final_norm", final_norm);
    fn("unembed", unembed);
}

Model init_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng = Rng::stream(seed, "init.model");
    Model m;
    m.config = config;
    int dh = config.d_hidden, di = config.d_int;
    auto mat = [&](int r, int c) {
        Tensor<float> t({r, c});
        rng.fill_gaussian(t, 0.02);
        return t;
    };
    m.tok_emb = mat(config.vocab, dh);
    m.pos_emb = mat(config.seq_max, dh);
    m.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& l : m.layers) {
        l.wq = mat(dh, dh);
        l.wk = mat(dh, dh);
        l.wv = mat(dh, dh);
        l.wo = mat(dh, dh);
        l.wg = mat(dh, di);
        l.wu = mat(dh, di);
        l.wd = mat(di, dh);
        l.norm_attn = Tensor<float>::full({dh}, 1.0f);
        l.norm_mlp = Tensor<float>::full({dh}, 1.0f);
        l.shape = {config.d_head(), config.d_head(), di};
    }
    m.final_norm = Tensor<float>::full({dh}, 1.0f);
    m.unembed = mat(dh, config.vocab);
    return m;
}

static void require_decisions_fit(const ModelConfig& config, const DecisionSet& decisions) {
    decisions.validate();
    if (decisions.n_layers() != config.n_layers) {
        throw ShapeError("decision set covers " + std::to_string(decisions.n_layers()) +
                         " layers, config has " + std::to_string(config.n_layers));
    }
    const auto& l0 = decisions.layers.front();
    if (static_cast<int>(l0.d_qk.size()) != config.d_head() ||
        static_cast<int>(l0.d_gu.size()) != config.d_int) {
        throw ShapeError("decision widths " + std::to_string(l0.d_qk.size()) + "/" +
                         std::to_string(l0.d_gu.size()) + " do not match config " +
                         std::to_string(config.d_head()) + "/" + std::to_string(config.d_int));
    }
}

int64_t count_remaining(const ModelConfig& config, const DecisionSet& decisions) {
    require_decisions_fit(config, decisions);
    int64_t dh = config.d_hidden, h = config.n_heads;
    int64_t total = 0;
    for (const auto& l : decisions.layers) {
        int64_t k_qk = popcount(l.d_qk);
        int64_t k_v = popcount(l.d_v);
        int64_t k_gu = popcount(l.d_gu);
        total += 2 * dh * h * k_qk;  // W_Q, W_K columns
        total += 2 * dh * h * k_v;   // W_V columns, W_O rows
        total += 3 * dh * k_gu;      // W_G, W_U columns, W_D rows
        total += 2 * dh;             // norm scales, never pruned
    }
    return total;
}

int64_t total_decoder_params(const ModelConfig& config) {
    return count_remaining(
        config, DecisionSet::all_ones(config.n_layers, config.d_head(), config.d_int));
}

}  // namespace atp
