#include "atp/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

namespace atp {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<const Tensor<float>*> grads_of(Tape<float>& tape, const std::vector<Var<float>>& vars,
                                           std::vector<Tensor<float>*>& mutable_view) {
    std::vector<const Tensor<float>*> grads;
    grads.reserve(vars.size());
    mutable_view.clear();
    for (Var<float> v : vars) {
        Tensor<float>& g = tape.grad(v);
        mutable_view.push_back(&g);
        grads.push_back(&g);
    }
    return grads;
}

double ratio_of(const Model& model, const DecisionSet& decisions) {
    return static_cast<double>(count_remaining(model.config, decisions)) /
           static_cast<double>(total_decoder_params(model.config));
}

}  // namespace

GUpdateStats update_g_step(const Model& model, const ModelAdapters& adapters,
                           Generator& generator, AdamW& opt,
                           const std::vector<std::vector<int>>& calib_batch,
                           const SparsityTarget& target, double alpha, double clip_norm,
                           Rng& gumbel_rng) {
    GUpdateStats stats;
    {
        Tape<float> tape;
        auto mv = stage_model<float>(tape, model, false);
        auto av = stage_adapters<float>(tape, adapters, false);
        auto gv = stage_generator<float>(tape, generator, true);
        auto parts = build_objective_g<float>(tape, gv, mv, &av, calib_batch, target, alpha,
                                              EmitMode::Sampled, &gumbel_rng);
        stats.lm = tape.value(parts.lm).data[0];
        stats.sparsity = tape.value(parts.sparsity).data[0];
        double total = tape.value(parts.total).data[0];
        if (!std::isfinite(total)) {
            throw TrainingError("decision update produced a non-finite objective (lm=" +
                                std::to_string(stats.lm) + ", ls=" +
                                std::to_string(stats.sparsity) + ")");
        }
        tape.backward(parts.total);

        auto vars = generator_param_vars(gv);
        std::vector<Tensor<float>*> clip_view;
        auto grads = grads_of(tape, vars, clip_view);
        clip_global_norm(clip_view, clip_norm);
        opt.step(generator_param_ptrs(generator), grads);
    }
    // Decisions handed to the tuning step come from a fresh deterministic
    // emission after the update, so the frozen structure carries no noise.
    stats.decisions = emit_decisions(generator, false);
    return stats;
}

namespace {

struct LoraStepStats {
    double lm = 0.0;
    double lasso = 0.0;
};

LoraStepStats lora_step(const Model& model, ModelAdapters& adapters,
                        const DecisionSet& decisions,
                        const std::vector<std::vector<int>>& train_batch, double beta,
                        double clip_norm, AdamW& opt) {
    Tape<float> tape;
    auto mv = stage_model<float>(tape, model, false);
    auto av = stage_adapters<float>(tape, adapters, true);
    auto parts = build_objective_l<float>(tape, mv, av, decisions, train_batch, beta);
    LoraStepStats stats;
    stats.lm = tape.value(parts.lm).data[0];
    stats.lasso = tape.value(parts.lasso).data[0];
    double total = tape.value(parts.total).data[0];
    if (!std::isfinite(total)) {
        throw TrainingError("tuning step produced a non-finite objective");
    }
    if (total > 1e4) {
        throw TrainingError("tuning objective diverged: " + std::to_string(total));
    }
    tape.backward(parts.total);
    auto vars = adapter_param_vars(av);
    std::vector<Tensor<float>*> clip_view;
    auto grads = grads_of(tape, vars, clip_view);
    clip_global_norm(clip_view, clip_norm);
    opt.step(adapter_param_ptrs(adapters), grads);
    return stats;
}

AdamWConfig adam_for(const RunConfig& cfg, double lr) {
    AdamWConfig a;
    a.lr = lr;
    a.beta1 = cfg.adam_beta1;
    a.beta2 = cfg.adam_beta2;
    a.eps = cfg.adam_eps;
    a.weight_decay = cfg.weight_decay;
    return a;
}

bool misses_target(double ratio, double retention) {
    return std::abs(ratio - retention) > 0.1 * retention;
}

}  // namespace

RunResult atp_run(const RunConfig& cfg, const Model& model, const Corpus& train_corpus,
                  const Corpus& calib_corpus) {
    cfg.validate();
    model.config.validate();

    RunResult out;
    out.adapters = init_adapters(model.config.n_layers, model.config.d_hidden,
                                 model.config.d_int, cfg.lora_rank, cfg.seed);
    GeneratorConfig gcfg;
    gcfg.n_layers = model.config.n_layers;
    gcfg.d_head = model.config.d_head();
    gcfg.d_int = model.config.d_int;
    out.generator = init_generator(gcfg, cfg.seed);

    SparsityTarget target;
    target.p = cfg.p;
    target.p_total = total_decoder_params(model.config);

    Rng data_rng = Rng::stream(cfg.seed, "data");
    Rng gumbel_rng = Rng::stream(cfg.seed, "gumbel");
    TrainSampler sampler(train_corpus, cfg.seq_len);
    CalibStream calib(calib_corpus, cfg.seq_len, cfg.batch_calib);

    AdamW opt_g(adam_for(cfg, cfg.lr_g));
    AdamW opt_lora(adam_for(cfg, cfg.lr_lora));

    out.decisions = DecisionSet::all_ones(model.config.n_layers, model.config.d_head(),
                                          model.config.d_int);
    double last_lm_g = 0.0;
    double last_ls = sparsity_loss(
        static_cast<double>(count_remaining(model.config, out.decisions)), target);

    int t_end = cfg.t_end();
    for (int t = 1; t <= cfg.steps; ++t) {
        auto t0 = Clock::now();
        if (t <= t_end) {
            auto gstats = update_g_step(model, out.adapters, out.generator, opt_g,
                                        calib.at_step(t - 1), target, cfg.alpha, cfg.clip_norm,
                                        gumbel_rng);
            out.decisions = std::move(gstats.decisions);
            last_lm_g = gstats.lm;
            last_ls = gstats.sparsity;
        }
        double beta_t = t <= t_end ? cfg.beta : cfg.beta * cfg.beta_mult;
        auto batch = sampler.batch(data_rng, cfg.batch_train);
        auto lstats = lora_step(model, out.adapters, out.decisions, batch, beta_t,
                                cfg.clip_norm, opt_lora);

        StepRecord rec;
        rec.step = t;
        rec.l_lm_g = last_lm_g;
        rec.l_s = last_ls;
        rec.l_lm = lstats.lm;
        rec.l_gl = lstats.lasso;
        rec.remain_ratio = ratio_of(model, out.decisions);
        rec.beta = beta_t;
        rec.wall_ms = cfg.log_wall_ms ? ms_since(t0) : 0.0;
        out.log.push_back(rec);
    }
    out.sparsity_warning = misses_target(ratio_of(model, out.decisions), target.retention());
    return out;
}

RunResult two_stage_run(const RunConfig& cfg, const Model& model, const Corpus& train_corpus,
                        const Corpus& calib_corpus) {
    cfg.validate();
    model.config.validate();

    RunResult out;
    out.adapters = init_adapters(model.config.n_layers, model.config.d_hidden,
                                 model.config.d_int, cfg.lora_rank, cfg.seed);
    GeneratorConfig gcfg;
    gcfg.n_layers = model.config.n_layers;
    gcfg.d_head = model.config.d_head();
    gcfg.d_int = model.config.d_int;
    out.generator = init_generator(gcfg, cfg.seed);

    SparsityTarget target;
    target.p = cfg.p;
    target.p_total = total_decoder_params(model.config);

    Rng data_rng = Rng::stream(cfg.seed, "data");
    Rng gumbel_rng = Rng::stream(cfg.seed, "gumbel");
    TrainSampler sampler(train_corpus, cfg.seq_len);
    CalibStream calib(calib_corpus, cfg.seq_len, cfg.batch_calib);

    AdamW opt_g(adam_for(cfg, cfg.lr_g));
    AdamW opt_lora(adam_for(cfg, cfg.lr_lora));

    out.decisions = DecisionSet::all_ones(model.config.n_layers, model.config.d_head(),
                                          model.config.d_int);
    double last_lm_g = 0.0;
    double last_ls = sparsity_loss(
        static_cast<double>(count_remaining(model.config, out.decisions)), target);

    int t_end = cfg.t_end();
    // stage 1: decision search on the frozen base; adapters stay at their
    // zero-product initialization
    for (int t = 1; t <= t_end; ++t) {
        auto t0 = Clock::now();
        auto gstats = update_g_step(model, out.adapters, out.generator, opt_g,
                                    calib.at_step(t - 1), target, cfg.alpha, cfg.clip_norm,
                                    gumbel_rng);
        out.decisions = std::move(gstats.decisions);
        last_lm_g = gstats.lm;
        last_ls = gstats.sparsity;

        StepRecord rec;
        rec.step = t;
        rec.l_lm_g = last_lm_g;
        rec.l_s = last_ls;
        rec.remain_ratio = ratio_of(model, out.decisions);
        rec.beta = 0.0;
        rec.wall_ms = cfg.log_wall_ms ? ms_since(t0) : 0.0;
        out.log.push_back(rec);
    }
    // stage 2: tuning with frozen decisions and the escalated coefficient
    double beta_t = cfg.beta * cfg.beta_mult;
    for (int t = t_end + 1; t <= cfg.steps; ++t) {
        auto t0 = Clock::now();
        auto batch = sampler.batch(data_rng, cfg.batch_train);
        auto lstats = lora_step(model, out.adapters, out.decisions, batch, beta_t,
                                cfg.clip_norm, opt_lora);
        StepRecord rec;
        rec.step = t;
        rec.l_lm_g = last_lm_g;
        rec.l_s = last_ls;
        rec.l_lm = lstats.lm;
        rec.l_gl = lstats.lasso;
        rec.remain_ratio = ratio_of(model, out.decisions);
        rec.beta = beta_t;
        rec.wall_ms = cfg.log_wall_ms ? ms_since(t0) : 0.0;
        out.log.push_back(rec);
    }
    out.sparsity_warning = misses_target(ratio_of(model, out.decisions), target.retention());
    return out;
}

std::vector<std::pair<int, double>> pretrain_model(Model& model, const Corpus& corpus,
                                                   const PretrainConfig& cfg) {
    if (cfg.steps < 1) throw ContractError("pretraining needs at least one step");
    model.config.validate();
    Rng data_rng = Rng::stream(cfg.seed, "data.pretrain");
    TrainSampler sampler(corpus, cfg.seq_len);
    AdamWConfig acfg;
    acfg.lr = cfg.lr;
    AdamW opt(acfg);

    std::vector<std::pair<int, double>> losses;
    for (int t = 1; t <= cfg.steps; ++t) {
        Tape<float> tape;
        auto mv = stage_model<float>(tape, model, true);
        auto batch = sampler.batch(data_rng, cfg.batch);
        auto loss = lm_loss_batch<float>(tape, mv, nullptr, nullptr, ForwardMode::Dense, batch);
        double value = tape.value(loss).data[0];
        if (!std::isfinite(value)) throw TrainingError("pretraining loss is non-finite");
        if (value > 1e4) throw TrainingError("pretraining diverged: " + std::to_string(value));
        tape.backward(loss);
        auto vars = model_param_vars(mv);
        std::vector<Tensor<float>*> clip_view;
        auto grads = grads_of(tape, vars, clip_view);
        clip_global_norm(clip_view, cfg.clip_norm);
        opt.step(model_param_ptrs(model), grads);
        losses.emplace_back(t, value);
    }
    return losses;
}

std::string step_log_csv(const std::vector<StepRecord>& log) {
    std::string out = "step,l_lm_g,l_s,l_lm,l_gl,remain_ratio,beta,wall_ms\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.step,
                      r.l_lm_g, r.l_s, r.l_lm, r.l_gl, r.remain_ratio, r.beta, r.wall_ms);
        out += buf;
    }
    return out;
}

void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write manifest " + path);
    for (const auto& [k, v] : entries) out << k << "=" << v << "\n";
}

}  // namespace atp
