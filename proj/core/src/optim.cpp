#include "dtr/optim.hpp"

#include <cmath>
#include <string>

namespace dtr {

AdamState::AdamState(AdamConfig config, std::span<const Shape> parameter_shapes) : config_(config) {
    m_.reserve(parameter_shapes.size());
    v_.reserve(parameter_shapes.size());
    for (const Shape& s : parameter_shapes) {
        m_.emplace_back(s);
        v_.emplace_back(s);
    }
}

double global_norm(std::span<Tensor<float>* const> grads) {
    double sq = 0.0;
    for (const Tensor<float>* g : grads) {
        for (float x : g->values()) sq += static_cast<double>(x) * x;
    }
    return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensor<float>* const> grads, double max_norm) {
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const float factor = static_cast<float>(max_norm / norm);
        for (Tensor<float>* g : grads) {
            for (float& x : g->values()) x *= factor;
        }
    }
    return norm;
}

void adam_step(std::span<Tensor<float>* const> params, std::span<Tensor<float>* const> grads, AdamState& state,
               double lr, std::span<const double> lr_multipliers, double clip) {
    if (params.size() != grads.size() || params.size() != state.m_.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                         std::to_string(grads.size()) + " gradients, " + std::to_string(state.m_.size()) +
                         " optimizer slots");
    }
    if (!lr_multipliers.empty() && lr_multipliers.size() != params.size()) {
        throw ShapeError("adam_step: lr multiplier count does not match parameter count");
    }
    const std::uint64_t step = state.step_ + 1;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        require_same_shape(params[i]->shape(), grads[i]->shape(), "adam_step");
        if (!all_finite(*grads[i])) {
            throw NumericError("non-finite gradient at optimizer step " + std::to_string(step));
        }
    }
    if (clip > 0.0) clip_global_norm(grads, clip);

    const AdamConfig& cfg = state.config_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double rate = lr * (lr_multipliers.empty() ? 1.0 : lr_multipliers[i]);
        float* p = params[i]->data();
        const float* g = grads[i]->data();
        float* m = state.m_[i].data();
        float* v = state.v_[i].data();
        for (std::size_t j = 0; j < params[i]->size(); ++j) {
            const double gj = g[j];
            const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double update = rate * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            p[j] = static_cast<float>(p[j] - update);
        }
    }
    state.step_ = step;
}

double scheduled_lr(double base_lr, std::uint64_t step, std::uint64_t warmup, std::uint64_t total) {
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (total <= warmup || step >= total) return total <= warmup && step < total ? base_lr : 0.0;
    return base_lr * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

}  // namespace dtr
