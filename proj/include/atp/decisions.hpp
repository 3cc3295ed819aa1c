#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atp/common.hpp"

namespace atp {

// Per-layer pruning decisions: 1 keeps an output dimension, 0 removes it.
// d_qk and d_v are per-head (the same vector applies to every head), d_gu
// spans the MLP intermediate width.
struct LayerDecisions {
    std::vector<uint8_t> d_qk;
    std::vector<uint8_t> d_v;
    std::vector<uint8_t> d_gu;

    int width() const {
        return static_cast<int>(d_qk.size() + d_v.size() + d_gu.size());
    }
};

struct DecisionSet {
    std::vector<LayerDecisions> layers;

    int n_layers() const { return static_cast<int>(layers.size()); }

    static DecisionSet all_ones(int n_layers, int d_head, int d_int);
    static DecisionSet all_zeros(int n_layers, int d_head, int d_int);

    // Every entry must be 0 or 1 and widths must agree across layers.
    void validate() const;

    bool operator==(const DecisionSet& other) const;
};

inline int popcount(const std::vector<uint8_t>& bits) {
    int n = 0;
    for (uint8_t b : bits) n += b;
    return n;
}

// Text format: header "atp-decisions v1 N=<N> dhead=<d_head> dint=<d_int>",
// then one '0'/'1' line per layer in (d_qk, d_v, d_gu) order.
std::string decisions_to_text(const DecisionSet& set);
DecisionSet decisions_from_text(const std::string& text);

}  // namespace atp
