#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "atp/tensor.hpp"

namespace atp {

// All randomness in a run flows from one seed split into named streams
// (data, gumbel, init, ...). Distributions are hand-rolled on top of the
// engine's raw bits so sampled values are pinned, not stdlib-dependent.
class Rng {
public:
    Rng() : engine_(0) {}
    explicit Rng(uint64_t seed) : engine_(seed) {}

    static uint64_t stream_seed(uint64_t seed, std::string_view stream) {
        // FNV-1a over the stream name folded into the seed, then mixed.
        uint64_t h = 1469598103934665603ull;
        for (char c : stream) {
            h ^= static_cast<uint8_t>(c);
            h *= 1099511628211ull;
        }
        return splitmix64(seed ^ h);
    }

    static Rng stream(uint64_t seed, std::string_view name) { return Rng(stream_seed(seed, name)); }

    // Uniform in [0,1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform in (0,1], safe as a log argument.
    double uniform01_open() { return 1.0 - uniform01(); }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = uniform01_open();
        double v = uniform01();
        double r = std::sqrt(-2.0 * std::log(u));
        double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Standard Gumbel(0,1): -ln(-ln u).
    double gumbel() {
        double u = uniform01_open();
        return -std::log(-std::log(u));
    }

    // Uniform integer in [0, n).
    int64_t below(int64_t n) {
        return static_cast<int64_t>(uniform01() * static_cast<double>(n));
    }

    template <typename T>
    void fill_gaussian(Tensor<T>& t, double stddev) {
        for (auto& v : t.data) v = static_cast<T>(gaussian() * stddev);
    }

private:
    static uint64_t splitmix64(uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a digest of raw bytes, used for data/manifest fingerprints.
inline uint64_t fnv1a64(const void* bytes, size_t n) {
    const auto* p = static_cast<const uint8_t*>(bytes);
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace atp
