#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dtr/config.hpp"
#include "dtr/encoder.hpp"

namespace dtr {

/// Standard encoder with an extractive span head. Teacher and baseline.
template <typename T>
struct BasicStandardModel {
    ModelConfig config;
    EmbeddingWeights<T> embeddings;
    std::vector<LayerWeights<T>> layers;
    SpanHeadWeights<T> head;

    template <typename U>
    BasicStandardModel<U> cast() const;
};

using StandardModel = BasicStandardModel<float>;

/// f(name, tensor, depth) over every parameter. depth is 0 for embeddings,
/// i + 1 for layer i and n_layers for the span head; the trainer derives
/// layer-wise learning rates from it.
template <typename Model, typename F>
void visit_parameters(Model& model, F&& f)
    requires requires { model.layers; }
{
    visit_embeddings(model.embeddings, [&](const std::string& name, auto& t) { f(name, t, 0u); });
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        visit_layer(model.layers[i], layer_prefix(i),
                    [&](const std::string& name, auto& t) { f(name, t, static_cast<std::uint32_t>(i + 1)); });
    }
    f(std::string("head.start"), model.head.start, model.config.n_layers);
    f(std::string("head.end"), model.head.end, model.config.n_layers);
}

// Truncated-normal (sigma 0.02) weights, zero biases, unit layernorm gains.
// Each tensor draws from its own named stream so results depend only on
// (config, seed).
StandardModel init_standard(const ModelConfig& config, std::uint64_t seed);

/// Runs the full stack on a padded batch, recording into `g`.
template <typename T>
TracedOutput<T> trace_standard(Graph<T>& g, const BasicStandardModel<T>& model, const SequenceBatch& batch,
                               const ForwardOptions& options);

template <typename T>
EncodeOutput<T> encode(const BasicStandardModel<T>& model, const SequenceBatch& batch,
                       const ForwardOptions& options = {});

// Single sequence. mask may be empty (all ones).
template <typename T>
EncodeOutput<T> encode(const BasicStandardModel<T>& model, std::span<const std::int32_t> tokens,
                       std::span<const std::int32_t> segments, std::span<const std::uint8_t> mask = {},
                       const ForwardOptions& options = {});

// [CLS] question [SEP] passage [SEP] with segments 0 up to the first [SEP]
// and 1 afterwards. An empty passage yields [CLS] question [SEP] only.
struct PairLayout {
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> segments;
    std::uint32_t passage_begin = 0;  // first passage token
    std::uint32_t passage_end = 0;    // one past the last passage token
};
PairLayout pair_layout(std::span<const std::int32_t> question, std::span<const std::int32_t> passage);

struct SpanAnswer {
    std::uint32_t start = 0;
    std::uint32_t end = 0;
    double score = 0.0;            // start[s] + end[e] of the chosen span
    double no_answer_score = 0.0;  // start[0] + end[0]
    bool is_no_answer = true;

    friend bool operator==(const SpanAnswer&, const SpanAnswer&) = default;
};

inline constexpr std::uint32_t kDefaultMaxAnswerLength = 30;

/// Best span with s <= e, e - s + 1 <= max_answer_length, both inside
/// [passage_begin, passage_end), scored start[s] + end[e]. The no-answer
/// span (0, 0) wins ties; among spans, the smaller s then the smaller e wins.
SpanAnswer predict_span(std::span<const float> start_logits, std::span<const float> end_logits,
                        std::uint32_t passage_begin, std::uint32_t passage_end,
                        std::uint32_t max_answer_length = kDefaultMaxAnswerLength);

/// Mean of the start-position and end-position cross-entropies over a batch
/// of [batch, length] logits. mask is [batch, length] (may be empty).
template <typename T>
Var<T> span_ce_loss(Var<T> start_logits, Var<T> end_logits, std::span<const std::uint32_t> gold_starts,
                    std::span<const std::uint32_t> gold_ends, std::span<const std::uint8_t> mask = {});

// Value-level span loss for a single sequence.
double span_ce_loss(std::span<const float> start_logits, std::span<const float> end_logits, std::uint32_t gold_start,
                    std::uint32_t gold_end);

}  // namespace dtr
