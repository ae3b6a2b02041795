#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dtr/dataset.hpp"
#include "dtr/decoupled.hpp"
#include "dtr/transformer.hpp"

namespace dtr {

struct DistillConfig {
    double lambda = 0.95;      // weight of the KL term; CE gets 1 - lambda
    double temperature = 3.0;
    double sigma = 0.5;        // weight of each MSE term
    bool use_kl = true;
    bool use_mse_repr = true;
    bool use_mse_attn = true;
    bool mse_all_layers = false;  // MSE over every cross layer, not just the last
    bool freeze_global_embeddings = false;

    void validate() const;
    // True when any term needs teacher outputs.
    bool needs_teacher() const;
};

struct TrainConfig {
    double lr = 5e-5;
    std::uint64_t warmup_steps = 200;
    double layer_decay = 0.95;  // lr multiplier per layer below the top
    std::uint32_t batch_size = 32;
    std::uint32_t epochs = 4;
    double clip_norm = 3.0;
    std::uint64_t seed = 0;
    double adam_eps = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;

    // Throws ConfigError; warmup is checked against the step count.
    void validate(std::size_t examples) const;
    std::uint64_t total_steps(std::size_t examples) const;
};

struct LossBreakdown {
    double ce = 0.0;
    double kl = 0.0;  // includes the T^2 factor
    double mse_repr = 0.0;
    double mse_attn = 0.0;
    double total = 0.0;

    // (1 - lambda) ce + lambda kl + sigma (mse_repr + mse_attn), disabled
    // terms contributing 0.
    static double combine(const LossBreakdown& parts, const DistillConfig& cfg);
};

/// Gold spans and the shared [batch, length] token mask of a batch.
struct SpanTargets {
    std::span<const std::uint32_t> gold_start;
    std::span<const std::uint32_t> gold_end;
    std::span<const std::uint8_t> mask;
};

template <typename T>
struct TracedLoss {
    Var<T> total;
    LossBreakdown parts;
};

/// Four-term objective on a traced student forward. `teacher` may be null
/// when no enabled term needs it. Teacher tensors enter as constants. The
/// student's hidden_states/attention_outputs are aligned to the teacher's
/// last layers (cross layer i against teacher layer x + i).
template <typename T>
TracedLoss<T> kd_loss(Graph<T>& g, const TracedOutput<T>& student, const EncodeOutput<T>* teacher,
                      const SpanTargets& targets, const DistillConfig& cfg);

// Value-level version over materialized outputs.
LossBreakdown kd_loss(const EncodeOutput<float>& student, const EncodeOutput<float>* teacher,
                      const SpanTargets& targets, const DistillConfig& cfg);

/// A training or evaluation batch in both layouts: teacher pairs and
/// separate question / passage inputs.
struct ExampleBatch {
    SequenceBatch pairs;
    SequenceBatch questions;
    SequenceBatch passages;
    std::vector<std::uint32_t> gold_start;
    std::vector<std::uint32_t> gold_end;
    std::vector<std::uint32_t> passage_begin;
    std::vector<std::uint32_t> passage_end;

    static ExampleBatch make(const Dataset& data, std::span<const std::size_t> indices);
};

template <typename T>
TracedOutput<T> trace_student(Graph<T>& g, const BasicStandardModel<T>& model, const ExampleBatch& batch,
                              const ForwardOptions& options);
template <typename T>
TracedOutput<T> trace_student(Graph<T>& g, const BasicDecoupledModel<T>& model, const ExampleBatch& batch,
                              const ForwardOptions& options);

struct EvalMetrics {
    double exact_match = 0.0;  // percent, rounded to 0.1
    double f1 = 0.0;
    std::size_t count = 0;
};

// Per-example scores in [0, 1].
double span_exact_match(std::uint32_t pred_start, std::uint32_t pred_end, std::uint32_t gold_start,
                        std::uint32_t gold_end);
double span_f1(std::uint32_t pred_start, std::uint32_t pred_end, std::uint32_t gold_start, std::uint32_t gold_end);

// Throws DataError on an empty dataset.
template <typename Model>
EvalMetrics evaluate(const Model& model, const Dataset& data, std::uint32_t batch_size = 64,
                     std::uint32_t max_answer_length = kDefaultMaxAnswerLength);

struct TraceRecord {
    std::uint64_t step = 0;
    std::uint32_t epoch = 0;
    LossBreakdown loss;  // epoch means
    EvalMetrics eval;
};

using TraceSink = std::function<void(const TraceRecord&)>;
// Name-based trainability filter; empty means everything trains.
using ParameterFilter = std::function<bool(const std::string&)>;

struct TrainResult {
    std::vector<TraceRecord> trace;
    std::uint64_t steps = 0;
};

/// Trains `student` in place against the objective. `teacher` may be null
/// when cfg needs no teacher outputs (plain fine-tuning). Evaluates on
/// `eval` after every epoch when it is non-empty.
template <typename Model>
TrainResult train_student(Model& student, const StandardModel* teacher, const Dataset& train, const Dataset& eval,
                          const DistillConfig& distill, const TrainConfig& config, const ParameterFilter& trainable = {},
                          const TraceSink& sink = {});

// Fine-tunes a standard model on the task loss alone.
TrainResult train_teacher(StandardModel& model, const Dataset& train, const Dataset& eval, const TrainConfig& config,
                          const TraceSink& sink = {});

TrainResult train_decoupled(const StandardModel& teacher, DecoupledModel& student, const Dataset& train,
                            const Dataset& eval, const DistillConfig& distill, const TrainConfig& config,
                            const TraceSink& sink = {});

// One JSON object per line: step, epoch, ce, kl, mse_repr, mse_attn, total, em, f1.
std::string trace_line(const TraceRecord& record);
void write_trace(const std::filesystem::path& path, std::span<const TraceRecord> trace);

}  // namespace dtr
