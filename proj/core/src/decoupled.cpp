#include "dtr/decoupled.hpp"

#include <algorithm>

namespace dtr {

template <typename T>
template <typename U>
BasicDecoupledModel<U> BasicDecoupledModel<T>::cast() const {
    BasicDecoupledModel<U> out;
    out.config = config;
    out.split = split;
    out.embeddings = cast_embeddings<U>(embeddings);
    for (const auto& l : input_layers) out.input_layers.push_back(cast_layer<U>(l));
    for (const auto& l : cross_layers) out.cross_layers.push_back(cast_layer<U>(l));
    out.global_position = global_position.template cast<U>();
    out.global_segment = global_segment.template cast<U>();
    out.head.start = head.start.template cast<U>();
    out.head.end = head.end.template cast<U>();
    if (compression) {
        out.compression = CompressionWeights<U>{
            compression->compress_w.template cast<U>(), compression->compress_b.template cast<U>(),
            compression->decompress_w.template cast<U>(), compression->decompress_b.template cast<U>()};
    }
    return out;
}

template BasicDecoupledModel<double> BasicDecoupledModel<float>::cast<double>() const;
template BasicDecoupledModel<float> BasicDecoupledModel<double>::cast<float>() const;

template <typename T>
BasicDecoupledModel<T> split_model(const BasicStandardModel<T>& standard, SplitSpec spec) {
    spec.validate(standard.config.n_layers);
    BasicDecoupledModel<T> model;
    model.config = standard.config;
    model.split = spec;
    model.embeddings = standard.embeddings;
    model.input_layers.assign(standard.layers.begin(), standard.layers.begin() + spec.input_layers);
    model.cross_layers.assign(standard.layers.begin() + spec.input_layers, standard.layers.end());
    model.global_position = standard.embeddings.position;
    model.global_segment = standard.embeddings.segment;
    model.head = standard.head;
    return model;
}

Representation Representation::from_matrix(Tensor<float> matrix, std::vector<std::uint8_t> mask) {
    Representation rep;
    rep.token_count = matrix.rank() >= 2 ? matrix.extent(0) : 0;
    if (mask.empty()) mask.assign(rep.token_count, 1);
    if (mask.size() != rep.token_count) throw ShapeError("representation: mask length differs from row count");
    rep.pooled = pooled_mean(matrix, mask);
    rep.matrix = std::move(matrix);
    rep.mask = std::move(mask);
    return rep;
}

std::vector<float> pooled_mean(const Tensor<float>& matrix, std::span<const std::uint8_t> mask) {
    const std::size_t rows = matrix.rank() >= 2 ? matrix.extent(0) : 0;
    const std::size_t cols = matrix.rank() >= 2 ? matrix.extent(1) : 0;
    std::vector<double> acc(cols, 0.0);
    std::size_t active = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask.empty() && !mask[r]) continue;
        ++active;
        for (std::size_t c = 0; c < cols; ++c) acc[c] += matrix(r, c);
    }
    std::vector<float> out(cols, 0.0f);
    if (active == 0) return out;
    for (std::size_t c = 0; c < cols; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(active));
    return out;
}

std::vector<std::int32_t> question_input(std::span<const std::int32_t> question) {
    std::vector<std::int32_t> out;
    out.reserve(question.size() + 2);
    out.push_back(kClsToken);
    out.insert(out.end(), question.begin(), question.end());
    out.push_back(kSepToken);
    return out;
}

std::vector<std::int32_t> passage_input(std::span<const std::int32_t> passage) {
    std::vector<std::int32_t> out(passage.begin(), passage.end());
    out.push_back(kSepToken);
    return out;
}

template <typename T>
Var<T> trace_input_stack(Graph<T>& g, const BasicDecoupledModel<T>& model, const SequenceBatch& inputs,
                         const ForwardOptions& options) {
    if (options.counters) ++options.counters->input_stack_passes;
    const bool local_segments = std::all_of(inputs.segments.begin(), inputs.segments.end(),
                                            [](std::int32_t s) { return s == 0; });
    SequenceBatch zeroed;
    if (!local_segments) {
        zeroed = inputs;
        std::fill(zeroed.segments.begin(), zeroed.segments.end(), 0);
    }
    const SequenceBatch& batch = local_segments ? inputs : zeroed;
    CounterRng rng = CounterRng(options.dropout_seed).split("dropout");
    const bool train = options.train();
    Var<T> x = blocks::embed(g, model.embeddings, model.config, batch, train, rng);
    for (const auto& layer : model.input_layers) {
        x = blocks::encoder_layer(g, layer, model.config, x, batch.mask, batch.batch, train, rng).first;
    }
    return x;
}

template <typename T>
Var<T> trace_compress(Graph<T>& g, const BasicDecoupledModel<T>& model, Var<T> rows) {
    if (!model.compression) return rows;
    return ops::linear(rows, g.parameter(model.compression->compress_w), g.parameter(model.compression->compress_b));
}

template <typename T>
Var<T> trace_decompress(Graph<T>& g, const BasicDecoupledModel<T>& model, Var<T> rows) {
    if (!model.compression) return rows;
    return ops::linear(rows, g.parameter(model.compression->decompress_w),
                       g.parameter(model.compression->decompress_b));
}

CrossLayout CrossLayout::make(std::span<const std::uint32_t> question_lengths, std::size_t question_stride,
                              std::span<const std::uint32_t> passage_lengths, std::size_t passage_stride) {
    if (question_lengths.size() != passage_lengths.size()) {
        throw ShapeError("cross layout: " + std::to_string(question_lengths.size()) + " questions for " +
                         std::to_string(passage_lengths.size()) + " passages");
    }
    CrossLayout layout;
    layout.batch = question_lengths.size();
    for (std::size_t b = 0; b < layout.batch; ++b) {
        layout.length = std::max<std::size_t>(layout.length, question_lengths[b] + passage_lengths[b]);
    }
    const std::size_t rows = layout.batch * layout.length;
    const std::size_t passage_base = layout.batch * question_stride;
    layout.gather.assign(rows, 0);
    layout.positions.assign(rows, 0);
    layout.segments.assign(rows, 0);
    layout.mask.assign(rows, 0);
    for (std::size_t b = 0; b < layout.batch; ++b) {
        const std::size_t q = question_lengths[b], p = passage_lengths[b];
        for (std::size_t j = 0; j < layout.length; ++j) {
            const std::size_t r = b * layout.length + j;
            if (j < q) {
                layout.gather[r] = static_cast<std::uint32_t>(b * question_stride + j);
            } else if (j < q + p) {
                layout.gather[r] = static_cast<std::uint32_t>(passage_base + b * passage_stride + (j - q));
                layout.segments[r] = 1;
            } else {
                // Padding copies a real row; it is masked everywhere downstream.
                layout.gather[r] = static_cast<std::uint32_t>(q > 0 ? b * question_stride : passage_base);
                continue;
            }
            layout.positions[r] = static_cast<std::int32_t>(j);
            layout.mask[r] = 1;
        }
    }
    return layout;
}

template <typename T>
TracedOutput<T> trace_cross_stack(Graph<T>& g, const BasicDecoupledModel<T>& model, Var<T> question_rows,
                                  Var<T> passage_rows, const CrossLayout& layout, const ForwardOptions& options) {
    if (options.counters) ++options.counters->cross_stack_passes;
    if (layout.length > model.config.max_positions) {
        throw DataError("concatenated length " + std::to_string(layout.length) + " exceeds max positions " +
                        std::to_string(model.config.max_positions));
    }
    CounterRng rng = CounterRng(options.dropout_seed).split("dropout");
    const bool train = options.train();
    Var<T> joint = ops::concat_rows(question_rows, passage_rows);
    Var<T> x = ops::gather_rows(joint, std::span<const std::uint32_t>(layout.gather));
    x = ops::add(x, ops::embedding(g.parameter(model.global_position), std::span<const std::int32_t>(layout.positions)));
    x = ops::add(x, ops::embedding(g.parameter(model.global_segment), std::span<const std::int32_t>(layout.segments)));

    TracedOutput<T> out;
    out.hidden_states.push_back(x);
    for (const auto& layer : model.cross_layers) {
        auto [h, attn] = blocks::encoder_layer(g, layer, model.config, x, layout.mask, layout.batch, train, rng);
        x = h;
        out.hidden_states.push_back(h);
        out.attention_outputs.push_back(attn);
    }
    std::tie(out.start_logits, out.end_logits) = blocks::span_logits(g, model.head, x, layout.batch, layout.length);
    return out;
}

template <typename T>
TracedOutput<T> trace_decoupled(Graph<T>& g, const BasicDecoupledModel<T>& model, const SequenceBatch& questions,
                                const SequenceBatch& passages, const ForwardOptions& options) {
    const CounterRng streams(options.dropout_seed);
    ForwardOptions q_opts = options, p_opts = options, c_opts = options;
    q_opts.dropout_seed = streams.split("question").key();
    p_opts.dropout_seed = streams.split("passage").key();
    c_opts.dropout_seed = streams.split("cross").key();
    Var<T> q = trace_input_stack(g, model, questions, q_opts);
    Var<T> p = trace_input_stack(g, model, passages, p_opts);
    p = trace_decompress(g, model, trace_compress(g, model, p));
    const CrossLayout layout = CrossLayout::make(questions.lengths, questions.length, passages.lengths, passages.length);
    return trace_cross_stack(g, model, q, p, layout, c_opts);
}

Representation encode_input(const DecoupledModel& model, std::span<const std::int32_t> tokens,
                            std::span<const std::uint8_t> mask, const ForwardOptions& options) {
    if (tokens.empty()) throw DataError("encode_input: empty input");
    if (!mask.empty() && mask.size() != tokens.size()) throw ShapeError("encode_input: mask length differs from input");
    if (!mask.empty() && std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
        throw DataError("encode_input: every position is masked");
    }
    if (tokens.size() > model.config.max_positions) {
        throw DataError("encode_input: input of " + std::to_string(tokens.size()) + " tokens exceeds max positions " +
                        std::to_string(model.config.max_positions));
    }
    const std::vector<std::int32_t> seq(tokens.begin(), tokens.end());
    SequenceBatch batch = SequenceBatch::from_sequences(std::span(&seq, 1));
    if (!mask.empty()) batch.mask.assign(mask.begin(), mask.end());
    Graph<float> g(false);
    Var<float> rows = trace_input_stack(g, model, batch, options);
    return Representation::from_matrix(rows.value(), batch.mask);
}

CompressedRepresentation compress(const DecoupledModel& model, const Representation& rep) {
    CompressedRepresentation out;
    out.token_count = rep.token_count;
    out.mask = rep.mask;
    if (!model.compression) {
        out.matrix = rep.matrix;
        out.pooled = rep.pooled;
        return out;
    }
    Graph<float> g(false);
    out.matrix = trace_compress(g, model, g.constant(rep.matrix)).value();
    out.pooled = pooled_mean(out.matrix, out.mask);
    return out;
}

Representation decompress(const DecoupledModel& model, const CompressedRepresentation& rep) {
    if (rep.matrix.rank() == 2 && rep.matrix.extent(1) != model.cache_dim()) {
        throw ShapeError("decompress: rows of width " + std::to_string(rep.matrix.extent(1)) +
                         " do not match the model's cache width " + std::to_string(model.cache_dim()));
    }
    if (!model.compression) return Representation::from_matrix(rep.matrix, rep.mask);
    Graph<float> g(false);
    return Representation::from_matrix(trace_decompress(g, model, g.constant(rep.matrix)).value(), rep.mask);
}

EncodeOutput<float> cross_forward(const DecoupledModel& model, const Representation& question,
                                  const Representation& passage, const ForwardOptions& options) {
    const std::size_t d = model.config.hidden;
    auto rows_of = [d](const Representation& rep) {
        if (rep.token_count == 0) return Tensor<float>({0, d});
        if (rep.matrix.rank() != 2 || rep.matrix.extent(1) != d) {
            throw ShapeError("cross_forward: representation of shape " + shape_string(rep.matrix.shape()) +
                             " does not have width " + std::to_string(d));
        }
        return rep.matrix;
    };
    const std::uint32_t q_len[] = {static_cast<std::uint32_t>(question.token_count)};
    const std::uint32_t p_len[] = {static_cast<std::uint32_t>(passage.token_count)};
    CrossLayout layout = CrossLayout::make(q_len, question.token_count, p_len, passage.token_count);
    for (std::size_t j = 0; j < question.token_count; ++j) layout.mask[j] = question.mask.empty() ? 1 : question.mask[j];
    for (std::size_t j = 0; j < passage.token_count; ++j) {
        layout.mask[question.token_count + j] = passage.mask.empty() ? 1 : passage.mask[j];
    }
    Graph<float> g(false);
    TracedOutput<float> traced =
        trace_cross_stack(g, model, g.constant(rows_of(question)), g.constant(rows_of(passage)), layout, options);
    return materialize(traced, 1, layout.length);
}

EncodeOutput<float> full_forward(const DecoupledModel& model, std::span<const std::int32_t> question,
                                 std::span<const std::int32_t> passage, const ForwardOptions& options) {
    const Representation q = encode_input(model, question_input(question), {}, options);
    Representation p = encode_input(model, passage_input(passage), {}, options);
    if (model.compression) p = decompress(model, compress(model, p));
    return cross_forward(model, q, p, options);
}

#define DTR_INSTANTIATE_DECOUPLED(T)                                                                           \
    template BasicDecoupledModel<T> split_model(const BasicStandardModel<T>&, SplitSpec);                      \
    template Var<T> trace_input_stack(Graph<T>&, const BasicDecoupledModel<T>&, const SequenceBatch&,          \
                                      const ForwardOptions&);                                                  \
    template Var<T> trace_compress(Graph<T>&, const BasicDecoupledModel<T>&, Var<T>);                          \
    template Var<T> trace_decompress(Graph<T>&, const BasicDecoupledModel<T>&, Var<T>);                        \
    template TracedOutput<T> trace_cross_stack(Graph<T>&, const BasicDecoupledModel<T>&, Var<T>, Var<T>,      \
                                               const CrossLayout&, const ForwardOptions&);                     \
    template TracedOutput<T> trace_decoupled(Graph<T>&, const BasicDecoupledModel<T>&, const SequenceBatch&,  \
                                             const SequenceBatch&, const ForwardOptions&);

DTR_INSTANTIATE_DECOUPLED(float)
DTR_INSTANTIATE_DECOUPLED(double)

}  // namespace dtr
