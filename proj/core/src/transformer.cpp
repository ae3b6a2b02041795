#include "dtr/transformer.hpp"

#include <cmath>
#include <limits>

namespace dtr {

template <typename T>
template <typename U>
BasicStandardModel<U> BasicStandardModel<T>::cast() const {
    BasicStandardModel<U> out;
    out.config = config;
    out.embeddings = cast_embeddings<U>(embeddings);
    for (const auto& l : layers) out.layers.push_back(cast_layer<U>(l));
    out.head.start = head.start.template cast<U>();
    out.head.end = head.end.template cast<U>();
    return out;
}

template BasicStandardModel<double> BasicStandardModel<float>::cast<double>() const;
template BasicStandardModel<float> BasicStandardModel<double>::cast<float>() const;

StandardModel init_standard(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const CounterRng rng(seed);
    StandardModel model;
    model.config = config;
    model.embeddings = init_embeddings<float>(config, rng);
    for (std::uint32_t i = 0; i < config.n_layers; ++i) {
        model.layers.push_back(init_layer<float>(config, rng, layer_prefix(i)));
    }
    model.head = init_span_head<float>(config, rng);
    return model;
}

template <typename T>
TracedOutput<T> trace_standard(Graph<T>& g, const BasicStandardModel<T>& model, const SequenceBatch& batch,
                               const ForwardOptions& options) {
    if (options.counters) ++options.counters->standard_passes;
    CounterRng rng = CounterRng(options.dropout_seed).split("dropout");
    const bool train = options.train();
    TracedOutput<T> out;
    Var<T> x = blocks::embed(g, model.embeddings, model.config, batch, train, rng);
    out.hidden_states.push_back(x);
    for (const auto& layer : model.layers) {
        auto [h, attn] = blocks::encoder_layer(g, layer, model.config, x, batch.mask, batch.batch, train, rng);
        x = h;
        out.hidden_states.push_back(h);
        out.attention_outputs.push_back(attn);
    }
    std::tie(out.start_logits, out.end_logits) = blocks::span_logits(g, model.head, x, batch.batch, batch.length);
    return out;
}

template <typename T>
EncodeOutput<T> encode(const BasicStandardModel<T>& model, const SequenceBatch& batch, const ForwardOptions& options) {
    Graph<T> g(false);
    return materialize(trace_standard(g, model, batch, options), batch.batch, batch.length);
}

template <typename T>
EncodeOutput<T> encode(const BasicStandardModel<T>& model, std::span<const std::int32_t> tokens,
                       std::span<const std::int32_t> segments, std::span<const std::uint8_t> mask,
                       const ForwardOptions& options) {
    if (segments.size() != tokens.size()) {
        throw ShapeError("encode: " + std::to_string(segments.size()) + " segment ids for " +
                         std::to_string(tokens.size()) + " tokens");
    }
    const std::vector<std::int32_t> seq(tokens.begin(), tokens.end());
    const std::vector<std::int32_t> seg(segments.begin(), segments.end());
    SequenceBatch batch = SequenceBatch::from_sequences(std::span(&seq, 1), std::span(&seg, 1));
    if (!mask.empty()) {
        if (mask.size() != tokens.size()) throw ShapeError("encode: mask length differs from token count");
        batch.mask.assign(mask.begin(), mask.end());
    }
    return encode(model, batch, options);
}

PairLayout pair_layout(std::span<const std::int32_t> question, std::span<const std::int32_t> passage) {
    PairLayout p;
    p.tokens.push_back(kClsToken);
    p.tokens.insert(p.tokens.end(), question.begin(), question.end());
    p.tokens.push_back(kSepToken);
    p.segments.assign(p.tokens.size(), 0);
    p.passage_begin = static_cast<std::uint32_t>(p.tokens.size());
    if (!passage.empty()) {
        p.tokens.insert(p.tokens.end(), passage.begin(), passage.end());
        p.passage_end = static_cast<std::uint32_t>(p.tokens.size());
        p.tokens.push_back(kSepToken);
        p.segments.resize(p.tokens.size(), 1);
    } else {
        p.passage_end = p.passage_begin;
    }
    return p;
}

SpanAnswer predict_span(std::span<const float> start_logits, std::span<const float> end_logits,
                        std::uint32_t passage_begin, std::uint32_t passage_end, std::uint32_t max_answer_length) {
    if (start_logits.size() != end_logits.size() || start_logits.empty()) {
        throw ShapeError("predict_span: start and end logits must be non-empty and equally long");
    }
    SpanAnswer answer;
    answer.no_answer_score = static_cast<double>(start_logits[0]) + static_cast<double>(end_logits[0]);
    answer.score = answer.no_answer_score;
    const std::uint32_t len = static_cast<std::uint32_t>(start_logits.size());
    const std::uint32_t begin = std::max<std::uint32_t>(passage_begin, 1);
    const std::uint32_t end = std::min(passage_end, len);
    double best = -std::numeric_limits<double>::infinity();
    std::uint32_t best_s = 0, best_e = 0;
    for (std::uint32_t s = begin; s < end; ++s) {
        const std::uint32_t last = std::min<std::uint32_t>(end, s + max_answer_length);
        for (std::uint32_t e = s; e < last; ++e) {
            const double score = static_cast<double>(start_logits[s]) + static_cast<double>(end_logits[e]);
            if (score > best) {
                best = score;
                best_s = s;
                best_e = e;
            }
        }
    }
    if (best > answer.no_answer_score) {
        answer.start = best_s;
        answer.end = best_e;
        answer.score = best;
        answer.is_no_answer = false;
    }
    return answer;
}

template <typename T>
Var<T> span_ce_loss(Var<T> start_logits, Var<T> end_logits, std::span<const std::uint32_t> gold_starts,
                    std::span<const std::uint32_t> gold_ends, std::span<const std::uint8_t> mask) {
    Var<T> s = ops::cross_entropy(start_logits, gold_starts, mask);
    Var<T> e = ops::cross_entropy(end_logits, gold_ends, mask);
    return ops::scale(ops::add(s, e), T(0.5));
}

double span_ce_loss(std::span<const float> start_logits, std::span<const float> end_logits, std::uint32_t gold_start,
                    std::uint32_t gold_end) {
    const std::size_t len = start_logits.size();
    if (gold_start >= len || gold_end >= len) {
        throw DataError("span_ce_loss: gold span (" + std::to_string(gold_start) + ", " + std::to_string(gold_end) +
                        ") outside sequence of length " + std::to_string(len));
    }
    Graph<double> g(false);
    const Tensor<double> s = Tensor<float>({1, len}, {start_logits.begin(), start_logits.end()}).cast<double>();
    const Tensor<double> e = Tensor<float>({1, len}, {end_logits.begin(), end_logits.end()}).cast<double>();
    const std::uint32_t gs[] = {gold_start};
    const std::uint32_t ge[] = {gold_end};
    return span_ce_loss<double>(g.constant(s), g.constant(e), gs, ge).value().item();
}

#define DTR_INSTANTIATE_STANDARD(T)                                                                           \
    template TracedOutput<T> trace_standard(Graph<T>&, const BasicStandardModel<T>&, const SequenceBatch&,    \
                                            const ForwardOptions&);                                           \
    template EncodeOutput<T> encode(const BasicStandardModel<T>&, const SequenceBatch&, const ForwardOptions&); \
    template EncodeOutput<T> encode(const BasicStandardModel<T>&, std::span<const std::int32_t>,              \
                                    std::span<const std::int32_t>, std::span<const std::uint8_t>,             \
                                    const ForwardOptions&);                                                   \
    template Var<T> span_ce_loss(Var<T>, Var<T>, std::span<const std::uint32_t>,                              \
                                 std::span<const std::uint32_t>, std::span<const std::uint8_t>);

DTR_INSTANTIATE_STANDARD(float)
DTR_INSTANTIATE_STANDARD(double)

}  // namespace dtr
