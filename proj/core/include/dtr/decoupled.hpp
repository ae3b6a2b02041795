#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtr/config.hpp"
#include "dtr/encoder.hpp"
#include "dtr/transformer.hpp"

namespace dtr {

/// Linear bottleneck around the cache boundary: d -> c -> d.
template <typename T>
struct CompressionWeights {
    Tensor<T> compress_w;    // [d, c]
    Tensor<T> compress_b;    // [c]
    Tensor<T> decompress_w;  // [c, d]
    Tensor<T> decompress_b;  // [d]

    std::size_t dim() const { return compress_b.size(); }
};

/// Input-component (lower x layers, one input at a time) plus
/// cross-component (upper y layers over the concatenation). Layer tensors
/// keep the teacher's names (layers.<i>.*) so the split is name-preserving.
template <typename T>
struct BasicDecoupledModel {
    ModelConfig config;
    SplitSpec split;
    EmbeddingWeights<T> embeddings;
    std::vector<LayerWeights<T>> input_layers;
    std::vector<LayerWeights<T>> cross_layers;
    Tensor<T> global_position;  // same shape as embeddings.position
    Tensor<T> global_segment;   // same shape as embeddings.segment
    SpanHeadWeights<T> head;
    std::optional<CompressionWeights<T>> compression;

    // Width of cached passage rows: c with a bottleneck, d without.
    std::size_t cache_dim() const { return compression ? compression->dim() : config.hidden; }

    template <typename U>
    BasicDecoupledModel<U> cast() const;
};

using DecoupledModel = BasicDecoupledModel<float>;

/// f(name, tensor, depth). Global tables and the bottleneck sit at depth x,
/// between the two components.
template <typename Model, typename F>
void visit_parameters(Model& model, F&& f)
    requires requires { model.cross_layers; }
{
    visit_embeddings(model.embeddings, [&](const std::string& name, auto& t) { f(name, t, 0u); });
    const std::uint32_t x = static_cast<std::uint32_t>(model.input_layers.size());
    for (std::size_t i = 0; i < model.input_layers.size(); ++i) {
        visit_layer(model.input_layers[i], layer_prefix(i),
                    [&](const std::string& name, auto& t) { f(name, t, static_cast<std::uint32_t>(i + 1)); });
    }
    f(std::string("global.position"), model.global_position, x);
    f(std::string("global.segment"), model.global_segment, x);
    if (model.compression) {
        f(std::string("compress.weight"), model.compression->compress_w, x);
        f(std::string("compress.bias"), model.compression->compress_b, x);
        f(std::string("decompress.weight"), model.compression->decompress_w, x);
        f(std::string("decompress.bias"), model.compression->decompress_b, x);
    }
    for (std::size_t i = 0; i < model.cross_layers.size(); ++i) {
        visit_layer(model.cross_layers[i], layer_prefix(x + i),
                    [&](const std::string& name, auto& t) { f(name, t, static_cast<std::uint32_t>(x + i + 1)); });
    }
    f(std::string("head.start"), model.head.start, model.config.n_layers);
    f(std::string("head.end"), model.head.end, model.config.n_layers);
}

/// Copies layers 1..x into the input-component and x+1..x+y into the
/// cross-component; global position/segment tables start as exact copies of
/// the local ones.
template <typename T>
BasicDecoupledModel<T> split_model(const BasicStandardModel<T>& standard, SplitSpec spec);

/// Output of the input-component for one input.
struct Representation {
    std::size_t token_count = 0;
    Tensor<float> matrix;  // [tokens, width]
    std::vector<std::uint8_t> mask;
    std::int32_t segment = 0;
    std::vector<float> pooled;  // mean over unmasked rows

    static Representation from_matrix(Tensor<float> matrix, std::vector<std::uint8_t> mask = {});
};

// Same layout, but rows are in the c-dimensional bottleneck space.
struct CompressedRepresentation {
    std::size_t token_count = 0;
    Tensor<float> matrix;  // [tokens, c]
    std::vector<std::uint8_t> mask;
    std::vector<float> pooled;  // [c]
};

// Mean over rows with mask = 1 (all rows when mask is empty), accumulated in
// double.
std::vector<float> pooled_mean(const Tensor<float>& matrix, std::span<const std::uint8_t> mask = {});

// Question input layout [CLS] q [SEP]; passage input layout p [SEP].
std::vector<std::int32_t> question_input(std::span<const std::int32_t> question);
std::vector<std::int32_t> passage_input(std::span<const std::int32_t> passage);

/// Input-component over a batch of independent inputs (local positions from
/// 0, local segment 0). Returns [batch * length, d].
template <typename T>
Var<T> trace_input_stack(Graph<T>& g, const BasicDecoupledModel<T>& model, const SequenceBatch& inputs,
                         const ForwardOptions& options);

// compress / decompress through the bottleneck (identity when absent).
template <typename T>
Var<T> trace_compress(Graph<T>& g, const BasicDecoupledModel<T>& model, Var<T> rows);
template <typename T>
Var<T> trace_decompress(Graph<T>& g, const BasicDecoupledModel<T>& model, Var<T> rows);

/// Row placement of a concatenated [question block | passage block] batch.
/// Example b occupies rows b * length .. b * length + q_b + p_b - 1, question
/// rows first, so the result lines up with the teacher's pair layout.
struct CrossLayout {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::uint32_t> gather;  // row of concat(question rows, passage rows)
    std::vector<std::int32_t> positions;
    std::vector<std::int32_t> segments;
    std::vector<std::uint8_t> mask;

    static CrossLayout make(std::span<const std::uint32_t> question_lengths, std::size_t question_stride,
                            std::span<const std::uint32_t> passage_lengths, std::size_t passage_stride);
};

/// Cross-component: gathers question and passage rows into the joint
/// layout, adds global position and segment embeddings (no layernorm), runs
/// the y cross layers and the span head. hidden_states[0] is the cross
/// input; one further entry per cross layer.
template <typename T>
TracedOutput<T> trace_cross_stack(Graph<T>& g, const BasicDecoupledModel<T>& model, Var<T> question_rows,
                                  Var<T> passage_rows, const CrossLayout& layout, const ForwardOptions& options);

/// Batched end-to-end forward over (question, passage) pairs; passage rows
/// pass through the bottleneck when one is attached.
template <typename T>
TracedOutput<T> trace_decoupled(Graph<T>& g, const BasicDecoupledModel<T>& model, const SequenceBatch& questions,
                                const SequenceBatch& passages, const ForwardOptions& options);

// Single-input encoding. `tokens` is already laid out ([CLS] q [SEP] or
// p [SEP]); mask may be empty.
Representation encode_input(const DecoupledModel& model, std::span<const std::int32_t> tokens,
                            std::span<const std::uint8_t> mask = {}, const ForwardOptions& options = {});

CompressedRepresentation compress(const DecoupledModel& model, const Representation& rep);
Representation decompress(const DecoupledModel& model, const CompressedRepresentation& rep);

EncodeOutput<float> cross_forward(const DecoupledModel& model, const Representation& question,
                                  const Representation& passage, const ForwardOptions& options = {});

/// encode_input on both sides (passage through the bottleneck if present)
/// followed by cross_forward. Raw token ids, no special tokens.
EncodeOutput<float> full_forward(const DecoupledModel& model, std::span<const std::int32_t> question,
                                 std::span<const std::int32_t> passage, const ForwardOptions& options = {});

}  // namespace dtr
