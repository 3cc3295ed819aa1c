#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "atp/autograd.hpp"

namespace atp {

// Central-difference gradient oracle. The callable rebuilds the scalar
// objective on a fresh tape from staged leaf vars, once per probe, so it must
// be a pure function of the parameter tensors (freeze any noise beforehand).
template <typename T>
using ObjectiveFn = std::function<Var<T>(Tape<T>&, std::vector<Var<T>>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
};

template <typename T>
double eval_objective(const ObjectiveFn<T>& f, const std::vector<Tensor<T>>& params) {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(p, false));
    Var<T> y = f(tape, vars);
    T v = tape.value(y).data[0];
    if (!std::isfinite(static_cast<double>(v))) {
        throw ContractError("grad_check: objective evaluated to a non-finite value");
    }
    return static_cast<double>(v);
}

// Relative error per spec: |analytic - central| / max(1, |central|).
// max_coords_per_tensor < 0 checks every coordinate; otherwise a fixed-stride
// subsample of that many coordinates per parameter tensor.
template <typename T>
GradCheckReport grad_check_multi(const ObjectiveFn<T>& f, std::vector<Tensor<T>> params,
                                 double eps = 1e-5, int64_t max_coords_per_tensor = -1) {
    // analytic pass
    std::vector<Tensor<T>> analytic;
    {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        for (const auto& p : params) vars.push_back(tape.leaf(p, true));
        Var<T> y = f(tape, vars);
        if (tape.value(y).numel() != 1) throw ContractError("grad_check: objective not scalar");
        if (!std::isfinite(static_cast<double>(tape.value(y).data[0]))) {
            throw ContractError("grad_check: objective evaluated to a non-finite value");
        }
        tape.backward(y);
        for (auto& v : vars) analytic.push_back(tape.grad(v));
    }

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        int64_t n = params[pi].numel();
        if (n == 0) continue;
        int64_t stride = 1;
        if (max_coords_per_tensor > 0 && n > max_coords_per_tensor) {
            stride = n / max_coords_per_tensor;
        }
        for (int64_t k = 0; k < n; k += stride) {
            T saved = params[pi].data[static_cast<size_t>(k)];
            params[pi].data[static_cast<size_t>(k)] = saved + static_cast<T>(eps);
            double fp = eval_objective(f, params);
            params[pi].data[static_cast<size_t>(k)] = saved - static_cast<T>(eps);
            double fm = eval_objective(f, params);
            params[pi].data[static_cast<size_t>(k)] = saved;
            double central = (fp - fm) / (2.0 * eps);
            double an = analytic[pi].data.empty() ? 0.0
                                                  : static_cast<double>(
                                                        analytic[pi].data[static_cast<size_t>(k)]);
            double rel = std::abs(an - central) / std::max(1.0, std::abs(central));
            if (rel > report.max_rel_err) report.max_rel_err = rel;
            ++report.coords_checked;
        }
    }
    return report;
}

// Single-parameter form.
template <typename T>
double grad_check(const ObjectiveFn<T>& f, const Tensor<T>& theta, double eps = 1e-5,
                  int64_t max_coords = -1) {
    return grad_check_multi<T>(f, {theta}, eps, max_coords).max_rel_err;
}

}  // namespace atp
