#pragma once

#include <cmath>
#include <vector>

#include "atp/tensor.hpp"

namespace atp {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam with bias correction and one shared step
// counter per parameter group.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    int64_t steps() const { return step_; }

    void step(const std::vector<Tensor<float>*>& params,
              const std::vector<const Tensor<float>*>& grads) {
        if (params.size() != grads.size()) throw ContractError("param/grad count mismatch");
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->shape);
                v_.emplace_back(p->shape);
            }
        }
        if (m_.size() != params.size()) throw ContractError("optimizer state size mismatch");
        ++step_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<float>& p = *params[i];
            const Tensor<float>& g = *grads[i];
            if (g.shape != p.shape) throw ShapeError("gradient shape mismatch in optimizer");
            Tensor<float>& m = m_[i];
            Tensor<float>& v = v_[i];
            for (size_t k = 0; k < p.data.size(); ++k) {
                double gk = static_cast<double>(g.data[k]);
                if (!std::isfinite(gk)) throw TrainingError("non-finite gradient in optimizer");
                double mk = cfg_.beta1 * m.data[k] + (1.0 - cfg_.beta1) * gk;
                double vk = cfg_.beta2 * v.data[k] + (1.0 - cfg_.beta2) * gk * gk;
                m.data[k] = static_cast<float>(mk);
                v.data[k] = static_cast<float>(vk);
                double update = (mk / bc1) / (std::sqrt(vk / bc2) + cfg_.eps);
                double decayed = update + cfg_.weight_decay * static_cast<double>(p.data[k]);
                p.data[k] = static_cast<float>(static_cast<double>(p.data[k]) - cfg_.lr * decayed);
            }
        }
    }

private:
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::vector<Tensor<float>> m_, v_;
};

// Scales gradients in place so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
inline double clip_global_norm(const std::vector<Tensor<float>*>& grads, double max_norm) {
    double ss = 0.0;
    for (auto* g : grads) {
        for (float v : g->data) ss += static_cast<double>(v) * static_cast<double>(v);
    }
    double norm = std::sqrt(ss);
    if (max_norm > 0.0 && norm > max_norm && norm > 0.0) {
        float s = static_cast<float>(max_norm / norm);
        for (auto* g : grads) {
            for (auto& v : g->data) v *= s;
        }
    }
    return norm;
}

}  // namespace atp
