#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/decoupled.hpp"
#include "dtr/distill.hpp"

namespace dtr {

/// Inserts a randomly initialised d -> c -> d pair (truncated normal sigma
/// 0.02, zero biases). Throws ConfigError unless 1 <= c <= d and the model
/// has no pair yet.
DecoupledModel attach_compression(DecoupledModel model, std::size_t c, std::uint64_t seed);

// Identity weights and zero biases; requires c == d.
void set_identity_compression(DecoupledModel& model);

inline double compression_rate(std::size_t d, std::size_t c) { return static_cast<double>(d) / static_cast<double>(c); }

// Input-component outputs (eval mode) of every passage, [tokens, d] each.
std::vector<Tensor<float>> passage_representations(const DecoupledModel& model, std::span<const Passage> passages);

// Mean squared reconstruction error over all rows.
double reconstruction_mse(const DecoupledModel& model, std::span<const Tensor<float>> representations);

struct Phase1Result {
    double initial_mse = 0.0;
    double final_mse = 0.0;
    std::vector<double> epoch_mse;  // running average over each epoch's batches
};

/// Trains only the compression pair to reconstruct input-component outputs.
/// batch_size counts passages; layer_decay does not apply.
Phase1Result phase1_train(DecoupledModel& model, std::span<const Passage> passages, const TrainConfig& config);

// Joint training of every student parameter through the bottleneck.
TrainResult phase2_train(DecoupledModel& model, const StandardModel& teacher, const Dataset& train,
                         const Dataset& eval, const DistillConfig& distill, const TrainConfig& config,
                         const TraceSink& sink = {});

struct CompressionSchedule {
    bool skip_phase1 = false;
    bool skip_phase2 = false;
    TrainConfig phase1;
    TrainConfig phase2;
};

struct CompressionResult {
    Phase1Result phase1;
    TrainResult phase2;
};

// Phase 1 on the training passages, then phase 2, honouring the skip flags.
CompressionResult train_compression(DecoupledModel& model, const StandardModel& teacher, const Dataset& train,
                                    const Dataset& eval, const DistillConfig& distill,
                                    const CompressionSchedule& schedule, const TraceSink& sink = {});

}  // namespace dtr
