#include "atp/compactor.hpp"

#include <sstream>

namespace atp {

namespace {

std::vector<int> kept_of(const std::vector<uint8_t>& bits) {
    std::vector<int> keep;
    for (size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) keep.push_back(static_cast<int>(i));
    }
    return keep;
}

// full-width indices for a per-head kept list
std::vector<int> tile_keep(const std::vector<int>& keep, int heads, int head_width) {
    std::vector<int> out;
    out.reserve(keep.size() * static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        for (int k : keep) out.push_back(h * head_width + k);
    }
    return out;
}

template <typename T>
Tensor<T> take_cols(const Tensor<T>& m, const std::vector<int>& keep) {
    Tensor<T> out({m.rows(), static_cast<int>(keep.size())});
    for (int i = 0; i < m.rows(); ++i) {
        for (size_t j = 0; j < keep.size(); ++j) {
            out.at(i, static_cast<int>(j)) = m.at(i, keep[j]);
        }
    }
    return out;
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& m, const std::vector<int>& keep) {
    Tensor<T> out({static_cast<int>(keep.size()), m.cols()});
    for (size_t i = 0; i < keep.size(); ++i) {
        for (int j = 0; j < m.cols(); ++j) out.at(static_cast<int>(i), j) = m.at(keep[i], j);
    }
    return out;
}

template <typename T>
Tensor<T> merged(const Tensor<float>& w, const LoraLinear& lin) {
    return merge_adapter(w.cast<T>(), lin.wa.cast<T>(), lin.wb.cast<T>());
}

// Zero the adapter groups the decisions pruned before merging, so the export
// does not depend on residual regularization error.
ModelAdapters hard_zeroed(const ModelAdapters& adapters, const CompactPlan& plan) {
    ModelAdapters out = adapters;
    const ModelConfig& cfg = plan.source;
    for (size_t n = 0; n < out.layers.size(); ++n) {
        auto& l = out.layers[n];
        const auto& p = plan.layers[n];
        auto zero_cols = [&](Tensor<float>& wb, const std::vector<int>& keep, int width,
                             bool per_head) {
            std::vector<uint8_t> kept(static_cast<size_t>(wb.cols()), 0);
            if (per_head) {
                for (int h = 0; h < cfg.n_heads; ++h) {
                    for (int k : keep) kept[static_cast<size_t>(h * width + k)] = 1;
                }
            } else {
                for (int k : keep) kept[static_cast<size_t>(k)] = 1;
            }
            for (int i = 0; i < wb.rows(); ++i) {
                for (int j = 0; j < wb.cols(); ++j) {
                    if (!kept[static_cast<size_t>(j)]) wb.at(i, j) = 0.0f;
                }
            }
        };
        auto zero_rows = [&](Tensor<float>& wa, const std::vector<int>& keep, int width,
                             bool per_head) {
            std::vector<uint8_t> kept(static_cast<size_t>(wa.rows()), 0);
            if (per_head) {
                for (int h = 0; h < cfg.n_heads; ++h) {
                    for (int k : keep) kept[static_cast<size_t>(h * width + k)] = 1;
                }
            } else {
                for (int k : keep) kept[static_cast<size_t>(k)] = 1;
            }
            for (int i = 0; i < wa.rows(); ++i) {
                if (kept[static_cast<size_t>(i)]) continue;
                for (int j = 0; j < wa.cols(); ++j) wa.at(i, j) = 0.0f;
            }
        };
        zero_cols(l.q.wb, p.qk_keep, cfg.d_head(), true);
        zero_cols(l.k.wb, p.qk_keep, cfg.d_head(), true);
        zero_cols(l.v.wb, p.v_keep, cfg.d_head(), true);
        zero_rows(l.o.wa, p.v_keep, cfg.d_head(), true);
        zero_cols(l.gate.wb, p.gu_keep, cfg.d_int, false);
        zero_cols(l.up.wb, p.gu_keep, cfg.d_int, false);
        zero_rows(l.down.wa, p.gu_keep, cfg.d_int, false);
    }
    return out;
}

}  // namespace

void CompactPlan::validate() const {
    source.validate();
    if (static_cast<int>(layers.size()) != source.n_layers) {
        throw ContractError("plan covers " + std::to_string(layers.size()) + " layers, config " +
                            std::to_string(source.n_layers));
    }
    for (const auto& l : layers) {
        auto check = [&](const std::vector<int>& keep, int bound, const char* what) {
            int prev = -1;
            for (int k : keep) {
                if (k <= prev) throw ContractError(std::string(what) + " indices not ascending");
                if (k < 0 || k >= bound) {
                    throw ContractError(std::string(what) + " index " + std::to_string(k) +
                                        " out of " + std::to_string(bound));
                }
                prev = k;
            }
        };
        check(l.qk_keep, source.d_head(), "qk");
        check(l.v_keep, source.d_head(), "v");
        check(l.gu_keep, source.d_int, "gu");
    }
}

CompactPlan build_plan(const DecisionSet& decisions, const ModelConfig& config) {
    decisions.validate();
    config.validate();
    if (decisions.n_layers() != config.n_layers ||
        static_cast<int>(decisions.layers[0].d_qk.size()) != config.d_head() ||
        static_cast<int>(decisions.layers[0].d_gu.size()) != config.d_int) {
        throw ShapeError("decision set does not match model config");
    }
    CompactPlan plan;
    plan.source = config;
    for (const auto& l : decisions.layers) {
        LayerPlan lp;
        lp.qk_keep = kept_of(l.d_qk);
        lp.v_keep = kept_of(l.d_v);
        lp.gu_keep = kept_of(l.d_gu);
        plan.layers.push_back(std::move(lp));
    }
    return plan;
}

Model compact(const Model& model, const ModelAdapters& adapters, const CompactPlan& plan) {
    plan.validate();
    if (model.config.n_layers != static_cast<int>(plan.layers.size()) ||
        static_cast<int>(adapters.layers.size()) != model.config.n_layers) {
        throw ContractError("plan/model/adapter layer counts disagree");
    }
    if (model.is_compact()) throw ContractError("model is already compacted");

    ModelAdapters zeroed = hard_zeroed(adapters, plan);
    const ModelConfig& cfg = model.config;
    Model out;
    out.config = cfg;
    out.tok_emb = model.tok_emb;
    out.pos_emb = model.pos_emb;
    out.final_norm = model.final_norm;
    out.unembed = model.unembed;
    out.layers.resize(model.layers.size());
    for (size_t n = 0; n < model.layers.size(); ++n) {
        const auto& src = model.layers[n];
        const auto& a = zeroed.layers[n];
        const auto& p = plan.layers[n];
        auto& dst = out.layers[n];
        auto qk_full = tile_keep(p.qk_keep, cfg.n_heads, cfg.d_head());
        auto v_full = tile_keep(p.v_keep, cfg.n_heads, cfg.d_head());

        dst.wq = take_cols(merged<double>(src.wq, a.q), qk_full).cast<float>();
        dst.wk = take_cols(merged<double>(src.wk, a.k), qk_full).cast<float>();
        dst.wv = take_cols(merged<double>(src.wv, a.v), v_full).cast<float>();
        dst.wo = take_rows(merged<double>(src.wo, a.o), v_full).cast<float>();
        dst.wg = take_cols(merged<double>(src.wg, a.gate), p.gu_keep).cast<float>();
        dst.wu = take_cols(merged<double>(src.wu, a.up), p.gu_keep).cast<float>();
        dst.wd = take_rows(merged<double>(src.wd, a.down), p.gu_keep).cast<float>();
        dst.norm_attn = src.norm_attn;
        dst.norm_mlp = src.norm_mlp;
        dst.shape = plan.shape_of(n);
    }
    return out;
}

template <typename T>
ModelVars<T> stage_compact(Tape<T>& tape, const Model& model, const ModelAdapters& adapters,
                           const CompactPlan& plan) {
    plan.validate();
    ModelAdapters zeroed = hard_zeroed(adapters, plan);
    const ModelConfig& cfg = model.config;
    ModelVars<T> mv;
    mv.config = cfg;
    mv.tok_emb = tape.constant(model.tok_emb.template cast<T>());
    mv.pos_emb = tape.constant(model.pos_emb.template cast<T>());
    mv.final_norm = tape.constant(model.final_norm.template cast<T>());
    mv.unembed = tape.constant(model.unembed.template cast<T>());
    for (size_t n = 0; n < model.layers.size(); ++n) {
        const auto& src = model.layers[n];
        const auto& a = zeroed.layers[n];
        const auto& p = plan.layers[n];
        auto qk_full = tile_keep(p.qk_keep, cfg.n_heads, cfg.d_head());
        auto v_full = tile_keep(p.v_keep, cfg.n_heads, cfg.d_head());
        LayerVars<T> lv;
        lv.wq = tape.constant(take_cols(merged<T>(src.wq, a.q), qk_full));
        lv.wk = tape.constant(take_cols(merged<T>(src.wk, a.k), qk_full));
        lv.wv = tape.constant(take_cols(merged<T>(src.wv, a.v), v_full));
        lv.wo = tape.constant(take_rows(merged<T>(src.wo, a.o), v_full));
        lv.wg = tape.constant(take_cols(merged<T>(src.wg, a.gate), p.gu_keep));
        lv.wu = tape.constant(take_cols(merged<T>(src.wu, a.up), p.gu_keep));
        lv.wd = tape.constant(take_rows(merged<T>(src.wd, a.down), p.gu_keep));
        lv.norm_attn = tape.constant(src.norm_attn.template cast<T>());
        lv.norm_mlp = tape.constant(src.norm_mlp.template cast<T>());
        lv.shape = plan.shape_of(n);
        mv.layers.push_back(lv);
    }
    return mv;
}

template ModelVars<float> stage_compact<float>(Tape<float>&, const Model&, const ModelAdapters&,
                                               const CompactPlan&);
template ModelVars<double> stage_compact<double>(Tape<double>&, const Model&,
                                                 const ModelAdapters&, const CompactPlan&);

namespace {

std::vector<std::vector<int>> probe_sequences(const ModelConfig& cfg, int n_probes,
                                              int probe_len, uint64_t seed) {
    Rng rng = Rng::stream(seed, "probe");
    std::vector<std::vector<int>> probes(static_cast<size_t>(n_probes));
    for (auto& p : probes) {
        p.resize(static_cast<size_t>(probe_len));
        for (auto& t : p) t = static_cast<int>(rng.below(cfg.vocab));
    }
    return probes;
}

template <typename T>
VerifyReport compare_probes(const Model& model, const ModelAdapters& adapters,
                            const DecisionSet& decisions,
                            const std::function<Tensor<T>(const std::vector<int>&)>& compact_fwd,
                            int n_probes, int probe_len, double tolerance, uint64_t seed) {
    VerifyReport report;
    report.tolerance = tolerance;
    auto probes = probe_sequences(model.config, n_probes, probe_len, seed);
    for (size_t pi = 0; pi < probes.size(); ++pi) {
        Tape<T> tape;
        auto mv = stage_model<T>(tape, model, false);
        auto av = stage_adapters<T>(tape, adapters, false);
        auto dv = stage_decisions<T>(tape, decisions);
        auto masked =
            model_forward<T>(tape, mv, &av, &dv, ForwardMode::MaskedAll, probes[pi]);
        Tensor<T> compact_logits = compact_fwd(probes[pi]);
        const Tensor<T>& m = tape.value(masked);
        for (size_t k = 0; k < m.data.size(); ++k) {
            double mm = static_cast<double>(m.data[k]);
            double cc = static_cast<double>(compact_logits.data[k]);
            double dev = std::abs(cc - mm) / (1.0 + std::abs(mm));
            if (dev > report.max_deviation) {
                report.max_deviation = dev;
                report.worst_probe = static_cast<int>(pi);
                report.worst_tokens = probes[pi];
            }
        }
    }
    report.passed = report.max_deviation <= tolerance;
    return report;
}

}  // namespace

template <typename T>
VerifyReport verify_plan(const Model& model, const ModelAdapters& adapters,
                         const DecisionSet& decisions, const CompactPlan& plan, int n_probes,
                         int probe_len, double tolerance, uint64_t seed) {
    std::function<Tensor<T>(const std::vector<int>&)> fwd =
        [&](const std::vector<int>& tokens) {
            Tape<T> tape;
            auto cv = stage_compact<T>(tape, model, adapters, plan);
            auto logits = model_forward<T>(tape, cv, nullptr, nullptr, ForwardMode::Dense, tokens);
            return tape.value(logits);
        };
    return compare_probes<T>(model, adapters, decisions, fwd, n_probes, probe_len, tolerance,
                             seed);
}

template VerifyReport verify_plan<float>(const Model&, const ModelAdapters&, const DecisionSet&,
                                         const CompactPlan&, int, int, double, uint64_t);
template VerifyReport verify_plan<double>(const Model&, const ModelAdapters&, const DecisionSet&,
                                          const CompactPlan&, int, int, double, uint64_t);

VerifyReport verify_exported(const Model& model, const ModelAdapters& adapters,
                             const DecisionSet& decisions, const Model& compact_model,
                             int n_probes, int probe_len, double tolerance, uint64_t seed) {
    std::function<Tensor<float>(const std::vector<int>&)> fwd =
        [&](const std::vector<int>& tokens) {
            Tape<float> tape;
            auto cv = stage_model<float>(tape, compact_model, false);
            auto logits =
                model_forward<float>(tape, cv, nullptr, nullptr, ForwardMode::Dense, tokens);
            return tape.value(logits);
        };
    return compare_probes<float>(model, adapters, decisions, fwd, n_probes, probe_len, tolerance,
                                 seed);
}

void require_verified(const VerifyReport& report) {
    if (!report.passed) throw VerificationError(verify_report_text(report));
}

std::string verify_report_text(const VerifyReport& report) {
    std::ostringstream os;
    os << (report.passed ? "verification passed" : "verification FAILED");
    os << ": max relative deviation " << report.max_deviation << " (tolerance "
       << report.tolerance << ")";
    if (report.worst_probe >= 0) {
        os << ", worst probe #" << report.worst_probe << " tokens [";
        for (size_t i = 0; i < report.worst_tokens.size(); ++i) {
            os << (i ? " " : "") << report.worst_tokens[i];
        }
        os << "]";
    }
    return os.str();
}

}  // namespace atp
