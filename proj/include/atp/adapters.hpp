#pragma once

#include <functional>
#include <string>
#include <vector>

#include "atp/autograd.hpp"
#include "atp/rng.hpp"

namespace atp {

// Low-rank adapter factors for one projection. The frozen base W lives with
// the model; wa (m x r) and wb (r x n) are the only trainable pieces. wb
// starts at zero so a fresh adapter contributes nothing.
struct LoraLinear {
    Tensor<float> wa;
    Tensor<float> wb;
};

struct LayerAdapters {
    LoraLinear q, k, v, o, gate, up, down;
};

struct ModelAdapters {
    int rank = 0;
    std::vector<LayerAdapters> layers;

    void visit_params(const std::function<void(const std::string&, Tensor<float>&)>& fn) {
        for (size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            std::string p = "layers." + std::to_string(i) + ".";
            const std::pair<const char*, LoraLinear*> roles[] = {
                {"q", &l.q}, {"k", &l.k}, {"v", &l.v},         {"o", &l.o},
                {"gate", &l.gate}, {"up", &l.up}, {"down", &l.down}};
            for (auto [name, lin] : roles) {
                fn(p + name + ".wa", lin->wa);
                fn(p + name + ".wb", lin->wb);
            }
        }
    }
};

// wa ~ N(0, 0.02), wb = 0, so wa*wb vanishes at step zero.
inline LoraLinear init_adapter(int m, int n, int r, Rng& rng) {
    if (r < 1 || r > std::min(m, n)) {
        throw ContractError("lora rank " + std::to_string(r) + " out of range for " +
                            std::to_string(m) + "x" + std::to_string(n));
    }
    LoraLinear lin;
    lin.wa = Tensor<float>({m, r});
    rng.fill_gaussian(lin.wa, 0.02);
    lin.wb = Tensor<float>({r, n});
    return lin;
}

inline ModelAdapters init_adapters(int n_layers, int d_hidden, int d_int, int rank,
                                   uint64_t seed) {
    Rng rng = Rng::stream(seed, "init.adapters");
    ModelAdapters a;
    a.rank = rank;
    a.layers.resize(static_cast<size_t>(n_layers));
    for (auto& l : a.layers) {
        l.q = init_adapter(d_hidden, d_hidden, rank, rng);
        l.k = init_adapter(d_hidden, d_hidden, rank, rng);
        l.v = init_adapter(d_hidden, d_hidden, rank, rng);
        l.o = init_adapter(d_hidden, d_hidden, rank, rng);
        l.gate = init_adapter(d_hidden, d_int, rank, rng);
        l.up = init_adapter(d_hidden, d_int, rank, rng);
        l.down = init_adapter(d_int, d_hidden, rank, rng);
    }
    return a;
}

// ---------------------------------------------------------------------------
// standalone projection forwards (plain tensors, no tape)

namespace detail {

template <typename T>
void apply_col_mask(Tensor<T>& y, const std::vector<uint8_t>& d) {
    if (static_cast<int>(d.size()) != y.cols()) {
        throw ShapeError("decision length " + std::to_string(d.size()) + " vs output width " +
                         std::to_string(y.cols()));
    }
    for (int i = 0; i < y.rows(); ++i) {
        for (int j = 0; j < y.cols(); ++j) {
            if (!d[static_cast<size_t>(j)]) y.at(i, j) = T(0);
        }
    }
}

}  // namespace detail

// x (w + wa wb) D: base and adapter both masked.
template <typename T>
Tensor<T> forward_masked_all(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& wa,
                             const Tensor<T>& wb, const std::vector<uint8_t>& d) {
    Tensor<T> y = matmul_plain(x, w);
    Tensor<T> a = matmul_plain(matmul_plain(x, wa), wb);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a.data[i];
    detail::apply_col_mask(y, d);
    return y;
}

// x (w D + wa wb): base masked, adapter untouched so gradient keeps flowing
// into currently pruned columns.
template <typename T>
Tensor<T> forward_masked_base(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& wa,
                              const Tensor<T>& wb, const std::vector<uint8_t>& d) {
    Tensor<T> y = matmul_plain(x, w);
    detail::apply_col_mask(y, d);
    Tensor<T> a = matmul_plain(matmul_plain(x, wa), wb);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a.data[i];
    return y;
}

// forward_masked_base - forward_masked_all == x wa wb (I - D).
template <typename T>
Tensor<T> mode_gap(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& wa,
                   const Tensor<T>& wb, const std::vector<uint8_t>& d) {
    Tensor<T> l = forward_masked_base(x, w, wa, wb, d);
    Tensor<T> g = forward_masked_all(x, w, wa, wb, d);
    for (size_t i = 0; i < l.data.size(); ++i) l.data[i] -= g.data[i];
    return l;
}

// w + wa wb.
template <typename T>
Tensor<T> merge_adapter(const Tensor<T>& w, const Tensor<T>& wa, const Tensor<T>& wb) {
    Tensor<T> y = matmul_plain(wa, wb);
    detail::require_same_shape(y, w, "merge_adapter");
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += w.data[i];
    return y;
}

// ---------------------------------------------------------------------------
// staged (on-tape) forms

template <typename T>
struct LoraVars {
    Var<T> wa, wb;
};

template <typename T>
struct LayerAdapterVars {
    LoraVars<T> q, k, v, o, gate, up, down;
};

template <typename T>
struct ModelAdapterVars {
    std::vector<LayerAdapterVars<T>> layers;
};

template <typename T>
ModelAdapterVars<T> stage_adapters(Tape<T>& tape, const ModelAdapters& adapters,
                                   bool trainable) {
    ModelAdapterVars<T> av;
    auto put = [&](const Tensor<float>& t) {
        if constexpr (std::is_same_v<T, float>) {
            return trainable ? tape.leaf(t, true) : tape.constant(t);
        } else {
            Tensor<T> c = t.template cast<T>();
            return trainable ? tape.leaf(std::move(c), true) : tape.constant(std::move(c));
        }
    };
    for (const auto& l : adapters.layers) {
        LayerAdapterVars<T> lv;
        lv.q = {put(l.q.wa), put(l.q.wb)};
        lv.k = {put(l.k.wa), put(l.k.wb)};
        lv.v = {put(l.v.wa), put(l.v.wb)};
        lv.o = {put(l.o.wa), put(l.o.wb)};
        lv.gate = {put(l.gate.wa), put(l.gate.wb)};
        lv.up = {put(l.up.wa), put(l.up.wb)};
        lv.down = {put(l.down.wa), put(l.down.wb)};
        av.layers.push_back(lv);
    }
    return av;
}

}  // namespace atp
