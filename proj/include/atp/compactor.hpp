#pragma once

#include <string>
#include <vector>

#include "atp/adapters.hpp"
#include "atp/model.hpp"

namespace atp {

// Kept indices per layer. Attention indices are per-head offsets in
// [0, d_head); W_O row indices follow from d_v replicated across heads, and
// W_D row indices mirror the gate/up column indices.
struct LayerPlan {
    std::vector<int> qk_keep;
    std::vector<int> v_keep;
    std::vector<int> gu_keep;
};

struct CompactPlan {
    ModelConfig source;
    std::vector<LayerPlan> layers;

    LayerShape shape_of(size_t layer) const {
        const auto& l = layers[layer];
        return LayerShape{static_cast<int>(l.qk_keep.size()), static_cast<int>(l.v_keep.size()),
                          static_cast<int>(l.gu_keep.size())};
    }
    void validate() const;
};

CompactPlan build_plan(const DecisionSet& decisions, const ModelConfig& config);

// Merge adapters into the base (in double, rounded once at the end) and
// physically slice the pruned rows/columns. Norms, embeddings and the
// unembedding pass through unchanged; W_O/W_D output widths stay d_hidden.
Model compact(const Model& model, const ModelAdapters& adapters, const CompactPlan& plan);

// Merge + slice staged directly on a tape at precision T: the compact-side
// forward for verification before any float32 rounding happens.
template <typename T>
ModelVars<T> stage_compact(Tape<T>& tape, const Model& model, const ModelAdapters& adapters,
                           const CompactPlan& plan);

struct VerifyReport {
    double max_deviation = 0.0;
    double tolerance = 0.0;
    int worst_probe = -1;
    std::vector<int> worst_tokens;
    bool passed = false;
};

// Max over probes and logit entries of |compact - masked| / (1 + |masked|),
// with the masked side run in all-masked mode under the frozen decisions.
// T picks the arithmetic: double verifies the algebra, float the rounding
// class of the exported file.
template <typename T>
VerifyReport verify_plan(const Model& model, const ModelAdapters& adapters,
                         const DecisionSet& decisions, const CompactPlan& plan, int n_probes,
                         int probe_len, double tolerance, uint64_t seed);

// Same probe comparison against an already exported compact model (float32).
VerifyReport verify_exported(const Model& model, const ModelAdapters& adapters,
                             const DecisionSet& decisions, const Model& compact_model,
                             int n_probes, int probe_len, double tolerance, uint64_t seed);

// Raises VerificationError with the worst-probe dump when a report failed.
void require_verified(const VerifyReport& report);

std::string verify_report_text(const VerifyReport& report);

}  // namespace atp
