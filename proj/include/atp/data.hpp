#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "atp/common.hpp"
#include "atp/rng.hpp"

namespace atp {

// Byte-level vocabulary: raw bytes 0..255 plus three specials.
constexpr int kBos = 256;
constexpr int kEos = 257;
constexpr int kPad = 258;
constexpr int kVocabSize = 259;

std::vector<int> tokenize(std::string_view text);
std::string detokenize(const std::vector<int>& ids);  // specials are dropped

// A tokenized text file: BOS + bytes + EOS, with a digest of the raw bytes
// for run manifests.
struct Corpus {
    std::vector<int> stream;
    uint64_t digest = 0;

    static Corpus from_text(const std::string& text);
    static Corpus from_file(const std::string& path);

    int64_t size() const { return static_cast<int64_t>(stream.size()); }

    // Non-overlapping seq_len windows covering the stream; a trailing
    // remainder shorter than two tokens is dropped (nothing to predict).
    std::vector<std::vector<int>> windows(int seq_len) const;
};

// Uniformly random window starts from a seeded stream.
struct TrainSampler {
    const Corpus* corpus = nullptr;
    int seq_len = 0;

    TrainSampler(const Corpus& c, int seq_len_);
    std::vector<int> next(Rng& data_rng) const;
    std::vector<std::vector<int>> batch(Rng& data_rng, int n) const;
};

// Fixed batch list cycled in order: batch t is batches[t mod period];
// there is no randomness in calibration sampling.
struct CalibStream {
    std::vector<std::vector<std::vector<int>>> batches;

    CalibStream(const Corpus& c, int seq_len, int batch_size);
    const std::vector<std::vector<int>>& at_step(int64_t step) const {
        return batches[static_cast<size_t>(step % static_cast<int64_t>(batches.size()))];
    }
    size_t period() const { return batches.size(); }
};

// Deterministic copy-task text: each line repeats a short random motif, so a
// small model can learn to continue the pattern.
std::string make_synthetic_corpus(uint64_t seed, int n_lines);

}  // namespace atp
