#include "dtr/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

#include "dtr/checkpoint.hpp"
#include "dtr/errors.hpp"

namespace dtr {

std::vector<RetrievalResult> retrieve(std::span<const float> query, const CacheFile& cache, std::size_t k) {
    if (query.size() != cache.header().c) {
        throw ShapeError("retrieve: query of width " + std::to_string(query.size()) + " against cache width " +
                         std::to_string(cache.header().c));
    }
    std::vector<RetrievalResult> results;
    results.reserve(cache.size());
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const std::vector<float> pooled = cache.pooled_at(i);
        double score = 0.0;
        for (std::size_t j = 0; j < query.size(); ++j) score += static_cast<double>(query[j]) * pooled[j];
        results.push_back({cache.id_at(i), score});
    }
    auto better = [](const RetrievalResult& a, const RetrievalResult& b) {
        return a.score != b.score ? a.score > b.score : a.passage_id < b.passage_id;
    };
    k = std::min(k, results.size());
    std::partial_sort(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(k), results.end(), better);
    results.resize(k);
    return results;
}

PassageStore::PassageStore(std::vector<Passage> passages) : passages_(std::move(passages)) {
    for (std::size_t i = 0; i < passages_.size(); ++i) {
        if (!index_.emplace(passages_[i].id, i).second) {
            throw DataError("passage store: duplicate id " + std::to_string(passages_[i].id));
        }
    }
}

const Passage& PassageStore::get(std::uint64_t id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw NotFoundError("passage sidecar has no id " + std::to_string(id));
    return passages_[it->second];
}

Reader::Reader(const DecoupledModel& model, const CacheFile& cache, const PassageStore& passages)
    : model_(model), cache_(cache), passages_(passages) {
    const std::uint64_t hash = model_hash(model);
    if (cache.header().model_hash != hash) {
        throw DataError("cache was built by a different model (cache hash " + std::to_string(cache.header().model_hash) +
                        ", model hash " + std::to_string(hash) + "); rebuild it with `index`");
    }
    if (cache.header().d != model.config.hidden || cache.header().c != model.cache_dim()) {
        throw DataError("cache widths do not match the model");
    }
}

SpanAnswer Reader::read(const Representation& question, std::uint64_t passage_id, std::uint32_t max_answer_length,
                        const ForwardOptions& forward) const {
    const Representation passage = decompress(model_, cache_.read_entry(passage_id));
    const EncodeOutput<float> out = cross_forward(model_, question, passage, forward);
    const auto begin = static_cast<std::uint32_t>(question.token_count);
    const auto end = static_cast<std::uint32_t>(question.token_count + passage.token_count - 1);
    return predict_span(out.start_logits.values(), out.end_logits.values(), begin, end, max_answer_length);
}

std::vector<RankedAnswer> Reader::answer(std::span<const std::int32_t> question, const AnswerOptions& options) const {
    ForwardOptions forward;
    forward.counters = options.counters;
    const Representation q = encode_input(model_, question_input(question), {}, forward);
    const std::vector<float> query = compress(model_, q).pooled;
    const auto hits = retrieve(query, cache_, options.k);

    std::vector<RankedAnswer> answers;
    for (const auto& hit : hits) {
        RankedAnswer a;
        a.passage_id = hit.passage_id;
        a.span = read(q, hit.passage_id, options.max_answer_length, forward);
        if (a.span.is_no_answer) continue;
        a.score = a.span.score - a.span.no_answer_score;
        const Passage& p = passages_.get(hit.passage_id);
        const std::size_t offset = q.token_count;
        a.text = tokens_text(std::span(p.tokens).subspan(a.span.start - offset, a.span.end - a.span.start + 1));
        answers.push_back(std::move(a));
    }
    std::stable_sort(answers.begin(), answers.end(),
                     [](const RankedAnswer& x, const RankedAnswer& y) { return x.score > y.score; });
    if (answers.empty()) {
        RankedAnswer none;
        none.passage_id = hits.empty() ? 0 : hits.front().passage_id;
        answers.push_back(none);
    }
    return answers;
}

std::vector<RankedAnswer> answer_question(const DecoupledModel& model, const CacheFile& cache,
                                          const PassageStore& passages, std::span<const std::int32_t> question,
                                          const AnswerOptions& options) {
    return Reader(model, cache, passages).answer(question, options);
}

EvalMetrics evaluate_cached(const Reader& reader, const DecoupledModel& model, const Dataset& data,
                            std::uint32_t max_answer_length) {
    if (data.empty()) throw DataError("evaluate: dataset is empty");
    double em = 0.0, f1 = 0.0;
    for (const auto& ex : data.examples()) {
        const Representation q = encode_input(model, question_input(ex.question));
        const SpanAnswer a = reader.read(q, ex.passage_id, max_answer_length);
        em += span_exact_match(a.start, a.end, ex.gold_start, ex.gold_end);
        f1 += span_f1(a.start, a.end, ex.gold_start, ex.gold_end);
    }
    const double n = static_cast<double>(data.size());
    EvalMetrics m;
    m.exact_match = std::round(1000.0 * em / n) / 10.0;
    m.f1 = std::round(1000.0 * f1 / n) / 10.0;
    m.count = data.size();
    return m;
}

SpanAnswer answer_online(const DecoupledModel& model, std::span<const std::int32_t> question,
                         std::span<const std::int32_t> passage, std::uint32_t max_answer_length) {
    const EncodeOutput<float> out = full_forward(model, question, passage);
    const auto begin = static_cast<std::uint32_t>(question.size() + 2);
    const auto end = static_cast<std::uint32_t>(begin + passage.size());
    return predict_span(out.start_logits.values(), out.end_logits.values(), begin, end, max_answer_length);
}

std::string answer_line(std::span<const std::int32_t> question, const RankedAnswer& a) {
    nlohmann::ordered_json j;
    j["question"] = std::vector<std::int32_t>(question.begin(), question.end());
    j["passage_id"] = a.passage_id;
    j["span"] = {a.span.start, a.span.end};
    j["no_answer"] = a.span.is_no_answer;
    j["text"] = a.text;
    j["score"] = a.score;
    return j.dump();
}

}  // namespace dtr
