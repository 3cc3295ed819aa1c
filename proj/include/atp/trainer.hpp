#pragma once

#include <string>
#include <utility>
#include <vector>

#include "atp/data.hpp"
#include "atp/generator.hpp"
#include "atp/objectives.hpp"
#include "atp/optimizer.hpp"

namespace atp {

struct RunConfig {
    int steps = 600;           // T
    int decision_end = 0;      // T_end; 0 means steps / 2
    double alpha = 5.0;        // sparsity constraint coefficient
    double beta = 0.3;         // group lasso coefficient
    double beta_mult = 100.0;  // escalation factor once decisions freeze
    double lr_lora = 1e-4;
    double lr_g = 5e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    int batch_train = 4;
    int batch_calib = 4;
    int seq_len = 48;
    double p = 0.5;  // target sparsity
    uint64_t seed = 1;
    double clip_norm = 1.0;  // 0 disables gradient clipping
    int lora_rank = 8;
    bool log_wall_ms = true;

    int t_end() const { return decision_end > 0 ? decision_end : steps / 2; }

    void validate() const {
        if (steps < 1) throw ContractError("steps must be >= 1");
        if (t_end() < 1 || t_end() > steps) throw ContractError("decision_end outside [1, steps]");
        if (p < 0.0 || p >= 1.0) throw ContractError("sparsity level must be in [0, 1)");
        if (lr_lora <= 0.0 || lr_g <= 0.0) throw ContractError("learning rates must be positive");
        if (batch_train < 1 || batch_calib < 1) throw ContractError("batch sizes must be >= 1");
        if (seq_len < 2) throw ContractError("seq_len must be >= 2");
        if (lora_rank < 1) throw ContractError("lora rank must be >= 1");
    }
};

struct StepRecord {
    int step = 0;
    double l_lm_g = 0.0;
    double l_s = 0.0;
    double l_lm = 0.0;
    double l_gl = 0.0;
    double remain_ratio = 0.0;
    double beta = 0.0;
    double wall_ms = 0.0;
};

std::string step_log_csv(const std::vector<StepRecord>& log);

struct RunResult {
    ModelAdapters adapters;
    Generator generator;
    DecisionSet decisions;
    std::vector<StepRecord> log;
    bool sparsity_warning = false;
};

// ---------------------------------------------------------------------------
// objective builders, shared between f32 training and f64 gradient checks

template <typename T>
struct ObjectiveGParts {
    Var<T> total, lm, sparsity, remaining;
    Emission<T> emission;
};

// Emit decisions from the generator, run the all-masked forward on the
// calibration batch, add the sparsity constraint.
template <typename T>
ObjectiveGParts<T> build_objective_g(Tape<T>& tape, const GeneratorVars<T>& gv,
                                     const ModelVars<T>& mv, const ModelAdapterVars<T>* av,
                                     const std::vector<std::vector<int>>& calib_batch,
                                     const SparsityTarget& target, double alpha, EmitMode mode,
                                     Rng* gumbel_rng) {
    ObjectiveGParts<T> parts;
    parts.emission = emit_decisions_on_tape(tape, gv, mode, gumbel_rng);
    parts.lm = lm_loss_batch(tape, mv, av, &parts.emission.vars, ForwardMode::MaskedAll,
                             calib_batch);
    parts.remaining = remaining_params_expr(tape, parts.emission.vars, mv.config);
    parts.sparsity = sparsity_loss_expr(tape, parts.remaining, target);
    parts.total = add(parts.lm, scale(parts.sparsity, static_cast<T>(alpha)));
    return parts;
}

template <typename T>
struct ObjectiveLParts {
    Var<T> total, lm, lasso;
};

// Base-masked forward on the training batch plus the group-lasso penalty.
template <typename T>
ObjectiveLParts<T> build_objective_l(Tape<T>& tape, const ModelVars<T>& mv,
                                     const ModelAdapterVars<T>& av, const DecisionSet& decisions,
                                     const std::vector<std::vector<int>>& train_batch,
                                     double beta) {
    ObjectiveLParts<T> parts;
    DecisionVars<T> dv = stage_decisions<T>(tape, decisions);
    parts.lm = lm_loss_batch(tape, mv, &av, &dv, ForwardMode::MaskedBase, train_batch);
    parts.lasso = group_lasso_expr(tape, av, decisions, mv.config);
    parts.total = add(parts.lm, scale(parts.lasso, static_cast<T>(beta)));
    return parts;
}

// ---------------------------------------------------------------------------
// parameter plumbing (struct tensors and staged vars share one fixed order)

inline std::vector<Tensor<float>*> generator_param_ptrs(Generator& g) {
    std::vector<Tensor<float>*> out;
    g.visit_trainable([&](const std::string&, Tensor<float>& t) { out.push_back(&t); });
    return out;
}

template <typename T>
std::vector<Var<T>> generator_param_vars(const GeneratorVars<T>& gv) {
    std::vector<Var<T>> out;
    for (const auto& blk : gv.blocks) {
        out.insert(out.end(), {blk.wq, blk.bq, blk.wk, blk.bk, blk.wv, blk.bv, blk.wo, blk.bo,
                               blk.ffn_w1, blk.ffn_b1, blk.ffn_ln_g, blk.ffn_ln_b, blk.ffn_w2,
                               blk.ffn_b2});
    }
    out.push_back(gv.final_ln_g);
    out.push_back(gv.final_ln_b);
    for (size_t n = 0; n < gv.head_w.size(); ++n) {
        out.push_back(gv.head_w[n]);
        out.push_back(gv.head_b[n]);
    }
    return out;
}

inline std::vector<Tensor<float>*> adapter_param_ptrs(ModelAdapters& a) {
    std::vector<Tensor<float>*> out;
    a.visit_params([&](const std::string&, Tensor<float>& t) { out.push_back(&t); });
    return out;
}

template <typename T>
std::vector<Var<T>> adapter_param_vars(const ModelAdapterVars<T>& av) {
    std::vector<Var<T>> out;
    for (const auto& l : av.layers) {
        for (const LoraVars<T>* lin : {&l.q, &l.k, &l.v, &l.o, &l.gate, &l.up, &l.down}) {
            out.push_back(lin->wa);
            out.push_back(lin->wb);
        }
    }
    return out;
}

inline std::vector<Tensor<float>*> model_param_ptrs(Model& m) {
    std::vector<Tensor<float>*> out;
    m.visit_params([&](const std::string&, Tensor<float>& t) { out.push_back(&t); });
    return out;
}

template <typename T>
std::vector<Var<T>> model_param_vars(const ModelVars<T>& mv) {
    std::vector<Var<T>> out;
    out.push_back(mv.tok_emb);
    out.push_back(mv.pos_emb);
    for (const auto& l : mv.layers) {
        out.insert(out.end(),
                   {l.wq, l.wk, l.wv, l.wo, l.wg, l.wu, l.wd, l.norm_attn, l.norm_mlp});
    }
    out.push_back(mv.final_norm);
    out.push_back(mv.unembed);
    return out;
}

// ---------------------------------------------------------------------------
// training entry points

struct GUpdateStats {
    double lm = 0.0;
    double sparsity = 0.0;
    DecisionSet decisions;  // deterministic re-emission after the M update
};

GUpdateStats update_g_step(const Model& model, const ModelAdapters& adapters,
                           Generator& generator, AdamW& opt,
                           const std::vector<std::vector<int>>& calib_batch,
                           const SparsityTarget& target, double alpha, double clip_norm,
                           Rng& gumbel_rng);

RunResult atp_run(const RunConfig& cfg, const Model& model, const Corpus& train_corpus,
                  const Corpus& calib_corpus);

// Two-stage baseline: decision search against the frozen base for t_end
// steps, then LoRA tuning with the decisions frozen and the escalated
// group-lasso coefficient throughout.
RunResult two_stage_run(const RunConfig& cfg, const Model& model, const Corpus& train_corpus,
                        const Corpus& calib_corpus);

struct PretrainConfig {
    int steps = 400;
    double lr = 1e-3;
    int batch = 8;
    int seq_len = 48;
    uint64_t seed = 1;
    double clip_norm = 1.0;
};

std::vector<std::pair<int, double>> pretrain_model(Model& model, const Corpus& corpus,
                                                   const PretrainConfig& cfg);

void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace atp
