#include "atp/generator.hpp"

namespace atp {

Tensor<float> orthonormal_rows(int rows, int cols, Rng& rng) {
    if (rows > cols) {
        throw ContractError("cannot orthonormalize " + std::to_string(rows) + " rows in " +
                            std::to_string(cols) + " dimensions");
    }
    // Gram-Schmidt in double, cast at the end.
    Tensor<double> m({rows, cols});
    rng.fill_gaussian(m, 1.0);
    for (int i = 0; i < rows; ++i) {
        for (int prev = 0; prev < i; ++prev) {
            double dot = 0.0;
            for (int j = 0; j < cols; ++j) dot += m.at(i, j) * m.at(prev, j);
            for (int j = 0; j < cols; ++j) m.at(i, j) -= dot * m.at(prev, j);
        }
        double norm = 0.0;
        for (int j = 0; j < cols; ++j) norm += m.at(i, j) * m.at(i, j);
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw ContractError("degenerate draw during orthonormalization");
        for (int j = 0; j < cols; ++j) m.at(i, j) /= norm;
    }
    return m.cast<float>();
}

Generator init_generator(const GeneratorConfig& config, uint64_t seed) {
    config.validate();
    Rng rng = Rng::stream(seed, "init.generator");
    Generator g;
    g.config = config;
    constexpr int w = GeneratorConfig::kWidth;
    constexpr int f = GeneratorConfig::kFfn;
    g.input = orthonormal_rows(config.n_layers, w, rng);
    for (auto& blk : g.blocks) {
        auto mat = [&](int r, int c) {
            Tensor<float> t({r, c});
            rng.fill_gaussian(t, 0.02);
            return t;
        };
        blk.wq = mat(w, w);
        blk.bq = Tensor<float>({w});
        blk.wk = mat(w, w);
        blk.bk = Tensor<float>({w});
        blk.wv = mat(w, w);
        blk.bv = Tensor<float>({w});
        blk.wo = mat(w, w);
        blk.bo = Tensor<float>({w});
        blk.ffn_w1 = mat(w, f);
        blk.ffn_b1 = Tensor<float>({f});
        blk.ffn_ln_g = Tensor<float>::full({f}, 1.0f);
        blk.ffn_ln_b = Tensor<float>({f});
        blk.ffn_w2 = mat(f, w);
        blk.ffn_b2 = Tensor<float>({w});
    }
    g.final_ln_g = Tensor<float>::full({w}, 1.0f);
    g.final_ln_b = Tensor<float>({w});
    // Zero heads make the initial soft logits zero everywhere, so the offset
    // alone decides: sigmoid(offset / temperature) rounds to all ones.
    for (int n = 0; n < config.n_layers; ++n) {
        g.head_w.emplace_back(Tensor<float>({w, config.out_width()}));
        g.head_b.emplace_back(Tensor<float>({config.out_width()}));
    }
    return g;
}

DecisionSet emit_decisions(const Generator& gen, bool sampled, Rng* gumbel_rng) {
    Tape<float> tape;
    auto gv = stage_generator<float>(tape, gen, false);
    auto emission = emit_decisions_on_tape<float>(
        tape, gv, sampled ? EmitMode::Sampled : EmitMode::Deterministic, gumbel_rng);
    return emission.hard;
}

}  // namespace atp
