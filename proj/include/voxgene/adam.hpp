#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "voxgene/error.hpp"
#include "voxgene/layers.hpp"

namespace voxgene {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction, applied in place over a ParamStore.
// A non-finite gradient aborts the whole step before any parameter moves.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::size_t steps() const { return step_; }

    void step(ParamStore& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params.tensor(i).size(), 0.0);
                v_[i].assign(params.tensor(i).size(), 0.0);
            }
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor& t = params.tensor(i);
            if (!t.has_grad()) continue;
            for (double g : t.grad())
                if (!std::isfinite(g))
                    throw numeric_error("non-finite gradient for parameter '" + params.name(i) +
                                        "'");
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& t = params.tensor(i);
            auto& m = m_[i];
            auto& v = v_[i];
            auto& p = t.values();
            const bool has_g = t.has_grad();
            for (std::size_t e = 0; e < p.size(); ++e) {
                const double g = has_g ? t.grad()[e] : 0.0;
                m[e] = cfg_.beta1 * m[e] + (1.0 - cfg_.beta1) * g;
                v[e] = cfg_.beta2 * v[e] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[e] / bc1;
                const double vhat = v[e] / bc2;
                p[e] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::size_t step_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

}  // namespace voxgene
