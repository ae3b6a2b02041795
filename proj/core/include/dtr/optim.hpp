#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dtr/tensor.hpp"

namespace dtr {

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
};

/// Per-parameter moments plus the shared step counter.
class AdamState {
public:
    AdamState(AdamConfig config, std::span<const Shape> parameter_shapes);

    const AdamConfig& config() const noexcept { return config_; }
    std::uint64_t step() const noexcept { return step_; }
    const Tensor<float>& first_moment(std::size_t i) const { return m_.at(i); }
    const Tensor<float>& second_moment(std::size_t i) const { return v_.at(i); }

private:
    friend void adam_step(std::span<Tensor<float>* const>, std::span<Tensor<float>* const>, AdamState&, double,
                          std::span<const double>, double);

    AdamConfig config_;
    std::uint64_t step_ = 0;
    std::vector<Tensor<float>> m_;
    std::vector<Tensor<float>> v_;
};

// Euclidean norm over every gradient entry.
double global_norm(std::span<Tensor<float>* const> grads);

// Scales every gradient by max_norm / norm when norm exceeds max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor<float>* const> grads, double max_norm);

/// One bias-corrected Adam update. `lr` is the scheduled rate for this step;
/// `lr_multipliers` (one per parameter, or empty for all 1) scale it per
/// parameter. Gradients are clipped first when clip > 0. Throws NumericError
/// naming the step on a non-finite gradient, before touching any parameter.
void adam_step(std::span<Tensor<float>* const> params, std::span<Tensor<float>* const> grads, AdamState& state,
               double lr, std::span<const double> lr_multipliers, double clip);

// Linear warmup over `warmup` steps to base_lr, then linear decay to 0 at
// `total` steps. step is 0-based.
double scheduled_lr(double base_lr, std::uint64_t step, std::uint64_t warmup, std::uint64_t total);

}  // namespace dtr
