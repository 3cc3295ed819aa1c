#include "atp/decisions.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace atp {

DecisionSet DecisionSet::all_ones(int n_layers, int d_head, int d_int) {
    DecisionSet s;
    s.layers.resize(static_cast<size_t>(n_layers));
    for (auto& l : s.layers) {
        l.d_qk.assign(static_cast<size_t>(d_head), 1);
        l.d_v.assign(static_cast<size_t>(d_head), 1);
        l.d_gu.assign(static_cast<size_t>(d_int), 1);
    }
    return s;
}

DecisionSet DecisionSet::all_zeros(int n_layers, int d_head, int d_int) {
    DecisionSet s = all_ones(n_layers, d_head, d_int);
    for (auto& l : s.layers) {
        std::fill(l.d_qk.begin(), l.d_qk.end(), 0);
        std::fill(l.d_v.begin(), l.d_v.end(), 0);
        std::fill(l.d_gu.begin(), l.d_gu.end(), 0);
    }
    return s;
}

void DecisionSet::validate() const {
    if (layers.empty()) throw ContractError("decision set has no layers");
    const auto& first = layers.front();
    for (size_t n = 0; n < layers.size(); ++n) {
        const auto& l = layers[n];
        if (l.d_qk.size() != first.d_qk.size() || l.d_v.size() != first.d_v.size() ||
            l.d_gu.size() != first.d_gu.size()) {
            throw ShapeError("decision widths differ at layer " + std::to_string(n));
        }
        if (l.d_qk.size() != l.d_v.size()) {
            throw ShapeError("d_qk and d_v widths differ at layer " + std::to_string(n));
        }
        auto check_bits = [&](const std::vector<uint8_t>& bits, const char* name) {
            for (uint8_t b : bits) {
                if (b != 0 && b != 1) {
                    throw ContractError(std::string("non-binary entry in ") + name +
                                        " at layer " + std::to_string(n));
                }
            }
        };
        check_bits(l.d_qk, "d_qk");
        check_bits(l.d_v, "d_v");
        check_bits(l.d_gu, "d_gu");
    }
}

bool DecisionSet::operator==(const DecisionSet& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (size_t n = 0; n < layers.size(); ++n) {
        if (layers[n].d_qk != other.layers[n].d_qk) return false;
        if (layers[n].d_v != other.layers[n].d_v) return false;
        if (layers[n].d_gu != other.layers[n].d_gu) return false;
    }
    return true;
}

std::string decisions_to_text(const DecisionSet& set) {
    set.validate();
    std::ostringstream os;
    os << "atp-decisions v1 N=" << set.n_layers() << " dhead=" << set.layers[0].d_qk.size()
       << " dint=" << set.layers[0].d_gu.size() << "\n";
    for (const auto& l : set.layers) {
        for (uint8_t b : l.d_qk) os << (b ? '1' : '0');
        for (uint8_t b : l.d_v) os << (b ? '1' : '0');
        for (uint8_t b : l.d_gu) os << (b ? '1' : '0');
        os << "\n";
    }
    return os.str();
}

DecisionSet decisions_from_text(const std::string& text) {
    std::istringstream is(text);
    std::string header;
    if (!std::getline(is, header)) throw FormatError("decision file is empty");
    int n = 0, d_head = 0, d_int = 0;
    int version = 0;
    if (std::sscanf(header.c_str(), "atp-decisions v%d N=%d dhead=%d dint=%d", &version, &n,
                    &d_head, &d_int) != 4) {
        throw FormatError("bad decision header: " + header);
    }
    if (version != 1) throw FormatError("unsupported decision format version " +
                                        std::to_string(version));
    if (n <= 0 || d_head <= 0 || d_int <= 0) throw FormatError("bad decision dimensions");
    DecisionSet set;
    set.layers.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::string line;
        if (!std::getline(is, line)) throw FormatError("decision file truncated at layer " +
                                                       std::to_string(i));
        if (static_cast<int>(line.size()) != 2 * d_head + d_int) {
            throw FormatError("layer " + std::to_string(i) + " has " +
                              std::to_string(line.size()) + " bits, expected " +
                              std::to_string(2 * d_head + d_int));
        }
        auto& l = set.layers[static_cast<size_t>(i)];
        auto parse = [&](int from, int count, std::vector<uint8_t>& out) {
            out.resize(static_cast<size_t>(count));
            for (int k = 0; k < count; ++k) {
                char c = line[static_cast<size_t>(from + k)];
                if (c != '0' && c != '1') {
                    throw FormatError("non-binary character in decisions at layer " +
                                      std::to_string(i));
                }
                out[static_cast<size_t>(k)] = c == '1' ? 1 : 0;
            }
        };
        parse(0, d_head, l.d_qk);
        parse(d_head, d_head, l.d_v);
        parse(2 * d_head, d_int, l.d_gu);
    }
    set.validate();
    return set;
}

}  // namespace atp
