#pragma once

#include <cmath>

#include "atp/adapters.hpp"
#include "atp/model.hpp"

namespace atp {

struct SparsityTarget {
    double p = 0.5;        // fraction of decoder parameters to remove
    int64_t p_total = 0;   // decoder parameters at all-ones decisions

    double retention() const { return 1.0 - p; }
    double target_params() const { return retention() * static_cast<double>(p_total); }

    void validate() const {
        if (p < 0.0 || p >= 1.0) throw ContractError("sparsity level must be in [0, 1)");
        if (p_total <= 0) throw ContractError("p_total must be positive");
    }
};

// log(max(R, rP) / min(R, rP)): zero exactly at the target, symmetric in
// ratio. R = 0 is clamped to one parameter so the loss stays total.
inline double sparsity_loss(double remaining, const SparsityTarget& target) {
    target.validate();
    double r = std::max(remaining, 1.0);
    double goal = target.target_params();
    return std::log(std::max(r, goal) / std::min(r, goal));
}

inline double objective_g(double lm_loss_value, double s_loss, double alpha) {
    return lm_loss_value + alpha * s_loss;
}

inline double objective_l(double lm_loss_value, double gl_loss, double beta) {
    return lm_loss_value + beta * gl_loss;
}

// ---------------------------------------------------------------------------
// differentiable forms

// R(d_all) as a tape expression over the emitted decision vars so the
// sparsity constraint backpropagates into the generator through the
// straight-through estimator.
template <typename T>
Var<T> remaining_params_expr(Tape<T>& tape, const DecisionVars<T>& decisions,
                             const ModelConfig& config) {
    T dh = static_cast<T>(config.d_hidden);
    T heads = static_cast<T>(config.n_heads);
    Var<T> total;
    for (const auto& l : decisions.layers) {
        Var<T> layer_params = add(
            add(scale(sum(l.d_qk), T(2) * dh * heads), scale(sum(l.d_v), T(2) * dh * heads)),
            scale(sum(l.d_gu), T(3) * dh));
        layer_params = add_scalar(layer_params, T(2) * dh);  // norm scales
        total = total.valid() ? add(total, layer_params) : layer_params;
    }
    return total;
}

template <typename T>
Var<T> sparsity_loss_expr(Tape<T>& tape, Var<T> remaining, const SparsityTarget& target) {
    target.validate();
    Var<T> clamped = clamp_min(remaining, T(1));
    T log_goal = static_cast<T>(std::log(target.target_params()));
    return abs_elem(sub(log_elem(clamped), tape.constant_scalar(log_goal)));
}

// ---------------------------------------------------------------------------
// LoRA-aware group lasso

namespace detail {

inline std::vector<uint8_t> pruned_tiled(const std::vector<uint8_t>& bits, int heads) {
    std::vector<uint8_t> sel;
    sel.reserve(bits.size() * static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        for (uint8_t b : bits) sel.push_back(b ? 0 : 1);
    }
    return sel;
}

inline std::vector<uint8_t> pruned_plain(const std::vector<uint8_t>& bits) {
    std::vector<uint8_t> sel;
    sel.reserve(bits.size());
    for (uint8_t b : bits) sel.push_back(b ? 0 : 1);
    return sel;
}

template <typename T>
double col_group_norms(const Tensor<T>& wb, const std::vector<uint8_t>& pruned) {
    double total = 0.0;
    for (int j = 0; j < wb.cols(); ++j) {
        if (!pruned[static_cast<size_t>(j)]) continue;
        double ss = 0.0;
        for (int i = 0; i < wb.rows(); ++i) {
            double v = static_cast<double>(wb.at(i, j));
            ss += v * v;
        }
        total += std::sqrt(ss);
    }
    return total;
}

template <typename T>
double row_group_norms(const Tensor<T>& wa, const std::vector<uint8_t>& pruned) {
    double total = 0.0;
    for (int i = 0; i < wa.rows(); ++i) {
        if (!pruned[static_cast<size_t>(i)]) continue;
        double ss = 0.0;
        for (int j = 0; j < wa.cols(); ++j) {
            double v = static_cast<double>(wa.at(i, j));
            ss += v * v;
        }
        total += std::sqrt(ss);
    }
    return total;
}

}  // namespace detail

// Sum of L2 norms over pruned adapter groups: wb columns wherever the
// projection's output mask is 0, and wa rows of the O/down projections
// wherever the previous mask prunes their input rows. Q/K/V/gate/up read the
// never-pruned hidden stream, so they contribute no row groups.
inline double group_lasso(const ModelAdapters& adapters, const DecisionSet& decisions,
                          const ModelConfig& config) {
    decisions.validate();
    if (static_cast<int>(adapters.layers.size()) != decisions.n_layers()) {
        throw ShapeError("adapter/decision layer mismatch");
    }
    double total = 0.0;
    for (size_t n = 0; n < adapters.layers.size(); ++n) {
        const auto& a = adapters.layers[n];
        const auto& d = decisions.layers[n];
        auto qk = detail::pruned_tiled(d.d_qk, config.n_heads);
        auto v = detail::pruned_tiled(d.d_v, config.n_heads);
        auto gu = detail::pruned_plain(d.d_gu);
        total += detail::col_group_norms(a.q.wb, qk);
        total += detail::col_group_norms(a.k.wb, qk);
        total += detail::col_group_norms(a.v.wb, v);
        total += detail::row_group_norms(a.o.wa, v);
        total += detail::col_group_norms(a.gate.wb, gu);
        total += detail::col_group_norms(a.up.wb, gu);
        total += detail::row_group_norms(a.down.wa, gu);
    }
    return total;
}

template <typename T>
Var<T> group_lasso_expr(Tape<T>& tape, const ModelAdapterVars<T>& adapters,
                        const DecisionSet& decisions, const ModelConfig& config) {
    decisions.validate();
    if (adapters.layers.size() != decisions.layers.size()) {
        throw ShapeError("adapter/decision layer mismatch");
    }
    Var<T> total;
    auto acc = [&](Var<T> term) { total = total.valid() ? add(total, term) : term; };
    for (size_t n = 0; n < adapters.layers.size(); ++n) {
        const auto& a = adapters.layers[n];
        const auto& d = decisions.layers[n];
        auto qk = detail::pruned_tiled(d.d_qk, config.n_heads);
        auto v = detail::pruned_tiled(d.d_v, config.n_heads);
        auto gu = detail::pruned_plain(d.d_gu);
        acc(sum_l2_cols(a.q.wb, qk));
        acc(sum_l2_cols(a.k.wb, qk));
        acc(sum_l2_cols(a.v.wb, v));
        acc(sum_l2_rows(a.o.wa, v));
        acc(sum_l2_cols(a.gate.wb, gu));
        acc(sum_l2_cols(a.up.wb, gu));
        acc(sum_l2_rows(a.down.wa, gu));
    }
    return total;
}

}  // namespace atp
