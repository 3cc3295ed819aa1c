#include "atp/data.hpp"

#include <fstream>
#include <sstream>

namespace atp {

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= kVocabSize) {
            throw InputError("token id " + std::to_string(id) + " outside vocabulary");
        }
        if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

Corpus Corpus::from_text(const std::string& text) {
    if (text.empty()) throw ContractError("corpus text is empty");
    Corpus c;
    c.digest = fnv1a64(text.data(), text.size());
    c.stream.reserve(text.size() + 2);
    c.stream.push_back(kBos);
    for (int id : tokenize(text)) c.stream.push_back(id);
    c.stream.push_back(kEos);
    return c;
}

Corpus Corpus::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_text(os.str());
}

std::vector<std::vector<int>> Corpus::windows(int seq_len) const {
    if (seq_len < 2) throw ContractError("window length must be >= 2");
    std::vector<std::vector<int>> out;
    for (size_t start = 0; start < stream.size(); start += static_cast<size_t>(seq_len)) {
        size_t end = std::min(stream.size(), start + static_cast<size_t>(seq_len));
        if (end - start < 2) break;
        out.emplace_back(stream.begin() + static_cast<int64_t>(start),
                         stream.begin() + static_cast<int64_t>(end));
    }
    if (out.empty()) throw ContractError("corpus too small for any window");
    return out;
}

TrainSampler::TrainSampler(const Corpus& c, int seq_len_) : corpus(&c), seq_len(seq_len_) {
    if (seq_len < 2) throw ContractError("window length must be >= 2");
    if (c.size() < seq_len) {
        throw ContractError("corpus (" + std::to_string(c.size()) +
                            " tokens) shorter than one window of " + std::to_string(seq_len));
    }
}

std::vector<int> TrainSampler::next(Rng& data_rng) const {
    int64_t max_start = corpus->size() - seq_len;
    int64_t start = data_rng.below(max_start + 1);
    return std::vector<int>(corpus->stream.begin() + start,
                            corpus->stream.begin() + start + seq_len);
}

std::vector<std::vector<int>> TrainSampler::batch(Rng& data_rng, int n) const {
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(next(data_rng));
    return out;
}

CalibStream::CalibStream(const Corpus& c, int seq_len, int batch_size) {
    if (batch_size < 1) throw ContractError("calibration batch size must be >= 1");
    auto samples = c.windows(seq_len);
    for (size_t i = 0; i < samples.size(); i += static_cast<size_t>(batch_size)) {
        size_t end = std::min(samples.size(), i + static_cast<size_t>(batch_size));
        batches.emplace_back(samples.begin() + static_cast<int64_t>(i),
                             samples.begin() + static_cast<int64_t>(end));
    }
}

std::string make_synthetic_corpus(uint64_t seed, int n_lines) {
    if (n_lines < 1) throw ContractError("synthetic corpus needs at least one line");
    Rng rng = Rng::stream(seed, "synthetic");
    std::string out;
    for (int line = 0; line < n_lines; ++line) {
        int motif_len = 3 + static_cast<int>(rng.below(6));
        std::string motif;
        for (int i = 0; i < motif_len; ++i) {
            motif.push_back(static_cast<char>('a' + rng.below(26)));
        }
        int width = 40 + static_cast<int>(rng.below(21));
        std::string row;
        while (static_cast<int>(row.size()) < width) row += motif;
        row.resize(static_cast<size_t>(width));
        out += row;
        out.push_back('\n');
    }
    return out;
}

}  // namespace atp
