#pragma once

#include <string>
#include <vector>

#include "atp/adapters.hpp"
#include "atp/data.hpp"
#include "atp/model.hpp"

namespace atp {

// exp of the mean next-token NLL over non-overlapping windows, every
// position weighted equally across the whole stream.
double perplexity(const Model& model, const ModelAdapters* adapters,
                  const DecisionSet* decisions, ForwardMode mode, const Corpus& corpus,
                  int seq_len);

// Mean of per-task score ratios pruned/dense. Summarization triples are
// pre-averaged into a single ratio by calling this on the triple first;
// lower-is-better metrics stay out entirely.
double relative_performance(const std::vector<double>& pruned, const std::vector<double>& dense);

struct DecisionDiff {
    double overall = 0.0;
    std::vector<double> per_layer;
};

// Normalized Hamming distance per layer over the (d_qk, d_v, d_gu)
// concatenation, and its mean across layers.
DecisionDiff decision_diff_ratio(const DecisionSet& a, const DecisionSet& b);

// CSV rows (layer, qk_pruned, v_pruned, gu_pruned) of pruned fractions.
std::string layer_ratio_report_csv(const DecisionSet& decisions);

struct SampleConfig {
    int max_new = 64;
    int top_k = 50;
    double top_p = 0.9;
    double temperature = 0.9;
    uint64_t seed = 1;
};

// Temperature-scaled top-k then nucleus sampling from the seeded stream.
// Stops early when EOS is produced.
std::vector<int> generate(const Model& model, const ModelAdapters* adapters,
                          const DecisionSet* decisions, ForwardMode mode,
                          const std::vector<int>& prompt, const SampleConfig& cfg);

}  // namespace atp
