#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dtr/config.hpp"
#include "dtr/graph.hpp"
#include "dtr/rng.hpp"
#include "dtr/tensor.hpp"

namespace dtr {

template <typename T>
struct EmbeddingWeights {
    Tensor<T> token;     // [vocab, d]
    Tensor<T> position;  // [max_positions, d]
    Tensor<T> segment;   // [n_segments, d]
    Tensor<T> ln_gamma;  // [d]
    Tensor<T> ln_beta;   // [d]
};

template <typename T>
struct LayerWeights {
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b;  // [d, d], [d]
    Tensor<T> o_w, o_b;                      // attention output projection
    Tensor<T> ln1_gamma, ln1_beta;
    Tensor<T> ffn_in_w, ffn_in_b;    // [d, ffn], [ffn]
    Tensor<T> ffn_out_w, ffn_out_b;  // [ffn, d], [d]
    Tensor<T> ln2_gamma, ln2_beta;
};

template <typename T>
struct SpanHeadWeights {
    Tensor<T> start;  // [d]
    Tensor<T> end;    // [d]
};

// Calls f(name, tensor) for every tensor of the layer in a fixed order.
template <typename Layer, typename F>
void visit_layer(Layer& layer, const std::string& prefix, F&& f) {
    f(prefix + "attn.q.weight", layer.q_w);
    f(prefix + "attn.q.bias", layer.q_b);
    f(prefix + "attn.k.weight", layer.k_w);
    f(prefix + "attn.k.bias", layer.k_b);
    f(prefix + "attn.v.weight", layer.v_w);
    f(prefix + "attn.v.bias", layer.v_b);
    f(prefix + "attn.out.weight", layer.o_w);
    f(prefix + "attn.out.bias", layer.o_b);
    f(prefix + "ln1.gamma", layer.ln1_gamma);
    f(prefix + "ln1.beta", layer.ln1_beta);
    f(prefix + "ffn.in.weight", layer.ffn_in_w);
    f(prefix + "ffn.in.bias", layer.ffn_in_b);
    f(prefix + "ffn.out.weight", layer.ffn_out_w);
    f(prefix + "ffn.out.bias", layer.ffn_out_b);
    f(prefix + "ln2.gamma", layer.ln2_gamma);
    f(prefix + "ln2.beta", layer.ln2_beta);
}

template <typename Emb, typename F>
void visit_embeddings(Emb& emb, F&& f) {
    f(std::string("embeddings.token"), emb.token);
    f(std::string("embeddings.position"), emb.position);
    f(std::string("embeddings.segment"), emb.segment);
    f(std::string("embeddings.ln.gamma"), emb.ln_gamma);
    f(std::string("embeddings.ln.beta"), emb.ln_beta);
}

inline std::string layer_prefix(std::size_t index) { return "layers." + std::to_string(index) + "."; }

template <typename T>
EmbeddingWeights<T> init_embeddings(const ModelConfig& config, const CounterRng& rng);
template <typename T>
LayerWeights<T> init_layer(const ModelConfig& config, const CounterRng& rng, const std::string& prefix);
template <typename T>
SpanHeadWeights<T> init_span_head(const ModelConfig& config, const CounterRng& rng);

// Truncated normal (sigma, cut at 2 sigma) drawn from the stream named `name`.
template <typename T>
Tensor<T> truncated_normal_tensor(Shape shape, double stddev, const CounterRng& rng, const std::string& name);

template <typename To, typename From>
LayerWeights<To> cast_layer(const LayerWeights<From>& layer);
template <typename To, typename From>
EmbeddingWeights<To> cast_embeddings(const EmbeddingWeights<From>& emb);

/// Padded batch of token sequences laid out row-major as [batch, length].
struct SequenceBatch {
    std::size_t batch = 0;
    std::size_t length = 0;  // padded length
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> positions;
    std::vector<std::int32_t> segments;
    std::vector<std::uint8_t> mask;
    std::vector<std::uint32_t> lengths;

    std::size_t rows() const { return batch * length; }

    // Positions restart at 0 per sequence; segments given per token, or all
    // `default_segment` when `segments` is empty.
    static SequenceBatch from_sequences(std::span<const std::vector<std::int32_t>> sequences,
                                        std::span<const std::vector<std::int32_t>> segments = {},
                                        std::int32_t default_segment = 0);
};

enum class Mode { eval, train };

// Number of stack executions, used to verify the question input stack runs
// once per question.
struct StackCounters {
    std::uint64_t input_stack_passes = 0;
    std::uint64_t cross_stack_passes = 0;
    std::uint64_t standard_passes = 0;
};

struct ForwardOptions {
    Mode mode = Mode::eval;
    std::uint64_t dropout_seed = 0;
    StackCounters* counters = nullptr;

    bool train() const { return mode == Mode::train; }
};

/// Graph handles for one forward pass, laid out like SequenceBatch rows.
template <typename T>
struct TracedOutput {
    std::vector<Var<T>> hidden_states;      // entry 0 is the stack input
    std::vector<Var<T>> attention_outputs;  // one per layer
    Var<T> start_logits;                    // [batch, length]
    Var<T> end_logits;
};

/// Plain-value counterpart of TracedOutput.
template <typename T>
struct EncodeOutput {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<Tensor<T>> hidden_states;
    std::vector<Tensor<T>> attention_outputs;
    Tensor<T> start_logits;
    Tensor<T> end_logits;

    const Tensor<T>& final_hidden() const { return hidden_states.back(); }
    const Tensor<T>& final_attention() const { return attention_outputs.back(); }
};

template <typename T>
EncodeOutput<T> materialize(const TracedOutput<T>& traced, std::size_t batch, std::size_t length);

namespace blocks {

// token + position + segment embeddings, layernorm, dropout.
template <typename T>
Var<T> embed(Graph<T>& g, const EmbeddingWeights<T>& emb, const ModelConfig& config, const SequenceBatch& batch,
             bool train, CounterRng& rng);

/// Post-LN encoder layer. Returns the layer output and the attention
/// sublayer output (after the output projection, before the residual).
template <typename T>
std::pair<Var<T>, Var<T>> encoder_layer(Graph<T>& g, const LayerWeights<T>& layer, const ModelConfig& config,
                                        Var<T> x, std::span<const std::uint8_t> mask, std::size_t batch,
                                        bool train, CounterRng& rng);

// Start and end logits, each [batch, length].
template <typename T>
std::pair<Var<T>, Var<T>> span_logits(Graph<T>& g, const SpanHeadWeights<T>& head, Var<T> hidden,
                                      std::size_t batch, std::size_t length);

}  // namespace blocks
}  // namespace dtr
