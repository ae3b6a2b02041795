#include "dtr/encoder.hpp"

#include <algorithm>

namespace dtr {

template <typename T>
Tensor<T> truncated_normal_tensor(Shape shape, double stddev, const CounterRng& rng, const std::string& name) {
    Tensor<T> t(std::move(shape));
    CounterRng stream = rng.split(name);
    for (T& v : t.values()) v = static_cast<T>(stream.truncated_normal(stddev));
    return t;
}

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> ones(std::size_t n) {
    return Tensor<T>::filled({n}, T{1});
}

}  // namespace

template <typename T>
EmbeddingWeights<T> init_embeddings(const ModelConfig& config, const CounterRng& rng) {
    const std::size_t d = config.hidden;
    EmbeddingWeights<T> emb;
    emb.token = truncated_normal_tensor<T>({config.vocab, d}, kInitStd, rng, "embeddings.token");
    emb.position = truncated_normal_tensor<T>({config.max_positions, d}, kInitStd, rng, "embeddings.position");
    emb.segment = truncated_normal_tensor<T>({config.n_segments, d}, kInitStd, rng, "embeddings.segment");
    emb.ln_gamma = ones<T>(d);
    emb.ln_beta = Tensor<T>({d});
    return emb;
}

template <typename T>
LayerWeights<T> init_layer(const ModelConfig& config, const CounterRng& rng, const std::string& prefix) {
    const std::size_t d = config.hidden, f = config.ffn;
    LayerWeights<T> l;
    l.q_w = truncated_normal_tensor<T>({d, d}, kInitStd, rng, prefix + "attn.q.weight");
    l.k_w = truncated_normal_tensor<T>({d, d}, kInitStd, rng, prefix + "attn.k.weight");
    l.v_w = truncated_normal_tensor<T>({d, d}, kInitStd, rng, prefix + "attn.v.weight");
    l.o_w = truncated_normal_tensor<T>({d, d}, kInitStd, rng, prefix + "attn.out.weight");
    l.q_b = Tensor<T>({d});
    l.k_b = Tensor<T>({d});
    l.v_b = Tensor<T>({d});
    l.o_b = Tensor<T>({d});
    l.ln1_gamma = ones<T>(d);
    l.ln1_beta = Tensor<T>({d});
    l.ffn_in_w = truncated_normal_tensor<T>({d, f}, kInitStd, rng, prefix + "ffn.in.weight");
    l.ffn_in_b = Tensor<T>({f});
    l.ffn_out_w = truncated_normal_tensor<T>({f, d}, kInitStd, rng, prefix + "ffn.out.weight");
    l.ffn_out_b = Tensor<T>({d});
    l.ln2_gamma = ones<T>(d);
    l.ln2_beta = Tensor<T>({d});
    return l;
}

template <typename T>
SpanHeadWeights<T> init_span_head(const ModelConfig& config, const CounterRng& rng) {
    SpanHeadWeights<T> head;
    head.start = truncated_normal_tensor<T>({config.hidden}, kInitStd, rng, "head.start");
    head.end = truncated_normal_tensor<T>({config.hidden}, kInitStd, rng, "head.end");
    return head;
}

template <typename To, typename From>
LayerWeights<To> cast_layer(const LayerWeights<From>& layer) {
    LayerWeights<To> out;
    visit_layer(out, "", [&](const std::string& name, Tensor<To>& dst) {
        visit_layer(layer, "", [&](const std::string& src_name, const Tensor<From>& src) {
            if (src_name == name) dst = src.template cast<To>();
        });
    });
    return out;
}

template <typename To, typename From>
EmbeddingWeights<To> cast_embeddings(const EmbeddingWeights<From>& emb) {
    EmbeddingWeights<To> out;
    out.token = emb.token.template cast<To>();
    out.position = emb.position.template cast<To>();
    out.segment = emb.segment.template cast<To>();
    out.ln_gamma = emb.ln_gamma.template cast<To>();
    out.ln_beta = emb.ln_beta.template cast<To>();
    return out;
}

SequenceBatch SequenceBatch::from_sequences(std::span<const std::vector<std::int32_t>> sequences,
                                            std::span<const std::vector<std::int32_t>> segments,
                                            std::int32_t default_segment) {
    if (!segments.empty() && segments.size() != sequences.size()) {
        throw ShapeError("sequence batch: " + std::to_string(segments.size()) + " segment lists for " +
                         std::to_string(sequences.size()) + " sequences");
    }
    SequenceBatch b;
    b.batch = sequences.size();
    for (const auto& s : sequences) b.length = std::max(b.length, s.size());
    const std::size_t rows = b.batch * b.length;
    b.tokens.assign(rows, kPadToken);
    b.positions.assign(rows, 0);
    b.segments.assign(rows, 0);
    b.mask.assign(rows, 0);
    for (std::size_t i = 0; i < b.batch; ++i) {
        const auto& s = sequences[i];
        if (!segments.empty() && segments[i].size() != s.size()) {
            throw ShapeError("sequence batch: segment list length differs from sequence " + std::to_string(i));
        }
        b.lengths.push_back(static_cast<std::uint32_t>(s.size()));
        for (std::size_t j = 0; j < s.size(); ++j) {
            const std::size_t r = i * b.length + j;
            b.tokens[r] = s[j];
            b.positions[r] = static_cast<std::int32_t>(j);
            b.segments[r] = segments.empty() ? default_segment : segments[i][j];
            b.mask[r] = 1;
        }
    }
    return b;
}

template <typename T>
EncodeOutput<T> materialize(const TracedOutput<T>& traced, std::size_t batch, std::size_t length) {
    EncodeOutput<T> out;
    out.batch = batch;
    out.length = length;
    for (const auto& h : traced.hidden_states) out.hidden_states.push_back(h.value());
    for (const auto& a : traced.attention_outputs) out.attention_outputs.push_back(a.value());
    out.start_logits = traced.start_logits.value();
    out.end_logits = traced.end_logits.value();
    return out;
}

namespace blocks {

template <typename T>
Var<T> embed(Graph<T>& g, const EmbeddingWeights<T>& emb, const ModelConfig& config, const SequenceBatch& batch,
             bool train, CounterRng& rng) {
    if (batch.length > config.max_positions) {
        throw DataError("sequence of length " + std::to_string(batch.length) + " exceeds max positions " +
                        std::to_string(config.max_positions));
    }
    for (std::int32_t s : batch.segments) {
        if (s < 0 || static_cast<std::uint32_t>(s) >= config.n_segments) {
            throw DataError("segment id " + std::to_string(s) + " outside [0, " + std::to_string(config.n_segments) +
                            ")");
        }
    }
    Var<T> x = ops::embedding(g.parameter(emb.token), std::span<const std::int32_t>(batch.tokens));
    x = ops::add(x, ops::embedding(g.parameter(emb.position), std::span<const std::int32_t>(batch.positions)));
    x = ops::add(x, ops::embedding(g.parameter(emb.segment), std::span<const std::int32_t>(batch.segments)));
    x = ops::layernorm(x, g.parameter(emb.ln_gamma), g.parameter(emb.ln_beta));
    return ops::dropout(x, static_cast<T>(config.dropout), train, rng);
}

template <typename T>
std::pair<Var<T>, Var<T>> encoder_layer(Graph<T>& g, const LayerWeights<T>& l, const ModelConfig& config, Var<T> x,
                                        std::span<const std::uint8_t> mask, std::size_t batch, bool train,
                                        CounterRng& rng) {
    const auto p = [&g](const Tensor<T>& t) { return g.parameter(t); };
    Var<T> q = ops::linear(x, p(l.q_w), p(l.q_b));
    Var<T> k = ops::linear(x, p(l.k_w), p(l.k_b));
    Var<T> v = ops::linear(x, p(l.v_w), p(l.v_b));
    Var<T> ctx = ops::attention(q, k, v, mask, ops::AttentionShape{batch, config.heads},
                                static_cast<T>(config.attention_dropout), train, rng);
    Var<T> attn_out = ops::linear(ctx, p(l.o_w), p(l.o_b));
    Var<T> h = ops::add(x, ops::dropout(attn_out, static_cast<T>(config.dropout), train, rng));
    h = ops::layernorm(h, p(l.ln1_gamma), p(l.ln1_beta));
    Var<T> f = ops::gelu(ops::linear(h, p(l.ffn_in_w), p(l.ffn_in_b)));
    f = ops::linear(f, p(l.ffn_out_w), p(l.ffn_out_b));
    Var<T> out = ops::add(h, ops::dropout(f, static_cast<T>(config.dropout), train, rng));
    out = ops::layernorm(out, p(l.ln2_gamma), p(l.ln2_beta));
    return {out, attn_out};
}

template <typename T>
std::pair<Var<T>, Var<T>> span_logits(Graph<T>& g, const SpanHeadWeights<T>& head, Var<T> hidden,
                                      std::size_t batch, std::size_t length) {
    Var<T> start = ops::reshape(ops::matvec(hidden, g.parameter(head.start)), Shape{batch, length});
    Var<T> end = ops::reshape(ops::matvec(hidden, g.parameter(head.end)), Shape{batch, length});
    return {start, end};
}

}  // namespace blocks

#define DTR_INSTANTIATE_ENCODER(T)                                                                           \
    template Tensor<T> truncated_normal_tensor<T>(Shape, double, const CounterRng&, const std::string&);     \
    template EmbeddingWeights<T> init_embeddings<T>(const ModelConfig&, const CounterRng&);                  \
    template LayerWeights<T> init_layer<T>(const ModelConfig&, const CounterRng&, const std::string&);       \
    template SpanHeadWeights<T> init_span_head<T>(const ModelConfig&, const CounterRng&);                    \
    template EncodeOutput<T> materialize(const TracedOutput<T>&, std::size_t, std::size_t);                  \
    template Var<T> blocks::embed(Graph<T>&, const EmbeddingWeights<T>&, const ModelConfig&,                 \
                                  const SequenceBatch&, bool, CounterRng&);                                  \
    template std::pair<Var<T>, Var<T>> blocks::encoder_layer(Graph<T>&, const LayerWeights<T>&,              \
                                                             const ModelConfig&, Var<T>,                     \
                                                             std::span<const std::uint8_t>, std::size_t,     \
                                                             bool, CounterRng&);                             \
    template std::pair<Var<T>, Var<T>> blocks::span_logits(Graph<T>&, const SpanHeadWeights<T>&, Var<T>,    \
                                                           std::size_t, std::size_t);

DTR_INSTANTIATE_ENCODER(float)
DTR_INSTANTIATE_ENCODER(double)

template LayerWeights<double> cast_layer<double, float>(const LayerWeights<float>&);
template LayerWeights<float> cast_layer<float, double>(const LayerWeights<double>&);
template EmbeddingWeights<double> cast_embeddings<double, float>(const EmbeddingWeights<float>&);
template EmbeddingWeights<float> cast_embeddings<float, double>(const EmbeddingWeights<double>&);

}  // namespace dtr
