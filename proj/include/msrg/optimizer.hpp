#pragma once

// Adam with bias correction, plus global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <vector>

#include "msrg/tensor.hpp"

namespace msrg {

struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState for_params(const std::vector<Tensor>& params, double lr) {
        AdamState s;
        s.lr = lr;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const Tensor& p : params) {
            s.m.emplace_back(p.size(), 0.0);
            s.v.emplace_back(p.size(), 0.0);
        }
        return s;
    }
};

// In-place bias-corrected update: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
// Parameters with no materialized gradient are treated as zero-gradient.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (params.size() != state.m.size())
        throw ShapeError("adam_step: parameter count " + std::to_string(params.size()) +
                         " does not match state count " + std::to_string(state.m.size()));
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != p.size())
            throw ShapeError("adam_step: moment buffer size mismatch for parameter " + std::to_string(i));
        auto& m = state.m[i];
        auto& v = state.v[i];
        double* theta = p.data();
        const bool has_grad = p.has_grad();
        const double* g = has_grad ? p.grad_buffer().data() : nullptr;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = has_grad ? g[j] : 0.0;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            theta[j] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

// Scales all buffers by max_norm/norm when the global L2 norm exceeds
// max_norm; returns the pre-clip norm either way.
inline double clip_global_norm(const std::vector<std::vector<double>*>& grads, double max_norm) {
    if (!(max_norm > 0.0))
        throw std::invalid_argument("clip_global_norm: max_norm must be positive");
    double sum_sq = 0.0;
    for (const auto* g : grads)
        for (double x : *g) sum_sq += x * x;
    const double norm = std::sqrt(sum_sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto* g : grads)
            for (double& x : *g) x *= scale;
    }
    return norm;
}

inline double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
    std::vector<std::vector<double>*> grads;
    grads.reserve(params.size());
    for (Tensor& p : params)
        if (p.has_grad()) grads.push_back(&p.grad_buffer());
    return clip_global_norm(grads, max_norm);
}

} // namespace msrg
