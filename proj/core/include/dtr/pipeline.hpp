#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtr/cache.hpp"
#include "dtr/dataset.hpp"
#include "dtr/decoupled.hpp"
#include "dtr/distill.hpp"

namespace dtr {

struct RetrievalResult {
    std::uint64_t passage_id = 0;
    double score = 0.0;

    friend bool operator==(const RetrievalResult&, const RetrievalResult&) = default;
};

/// Exact dot product against every pooled vector; descending score, ties by
/// ascending id. k larger than the cache returns every entry.
std::vector<RetrievalResult> retrieve(std::span<const float> query, const CacheFile& cache, std::size_t k);

/// Passage sidecar keyed by id.
class PassageStore {
public:
    PassageStore() = default;
    explicit PassageStore(std::vector<Passage> passages);

    const Passage& get(std::uint64_t id) const;  // NotFoundError
    std::size_t size() const { return passages_.size(); }

private:
    std::vector<Passage> passages_;
    std::unordered_map<std::uint64_t, std::size_t> index_;
};

struct RankedAnswer {
    std::uint64_t passage_id = 0;
    SpanAnswer span;
    std::string text;    // sidecar tokens at the span; empty for no-answer
    double score = 0.0;  // span score minus the passage's no-answer score
};

struct AnswerOptions {
    std::size_t k = 5;
    std::uint32_t max_answer_length = kDefaultMaxAnswerLength;
    StackCounters* counters = nullptr;
};

/// Answers questions against a cache built by the same model. The model
/// hash and widths are checked once, on construction.
class Reader {
public:
    Reader(const DecoupledModel& model, const CacheFile& cache, const PassageStore& passages);

    /// Encodes the question once, reads and decompresses the top-k cached
    /// passages, runs the cross-component on each and ranks the spans.
    /// Abstaining passages are dropped unless all abstain, in which case a
    /// single no-answer result is returned.
    std::vector<RankedAnswer> answer(std::span<const std::int32_t> question, const AnswerOptions& options = {}) const;

    // Span for one cached passage, without ranking.
    SpanAnswer read(const Representation& question, std::uint64_t passage_id, std::uint32_t max_answer_length,
                    const ForwardOptions& forward = {}) const;

private:
    const DecoupledModel& model_;
    const CacheFile& cache_;
    const PassageStore& passages_;
};

std::vector<RankedAnswer> answer_question(const DecoupledModel& model, const CacheFile& cache,
                                          const PassageStore& passages, std::span<const std::int32_t> question,
                                          const AnswerOptions& options = {});

// EM/F1 reading each example's gold passage from the cache.
EvalMetrics evaluate_cached(const Reader& reader, const DecoupledModel& model, const Dataset& data,
                            std::uint32_t max_answer_length = kDefaultMaxAnswerLength);

// Span extracted from full_forward on one (question, passage) pair.
SpanAnswer answer_online(const DecoupledModel& model, std::span<const std::int32_t> question,
                         std::span<const std::int32_t> passage,
                         std::uint32_t max_answer_length = kDefaultMaxAnswerLength);

// {"question":[..],"passage_id":..,"span":[s,e],"no_answer":..,"text":"..","score":..}
std::string answer_line(std::span<const std::int32_t> question, const RankedAnswer& answer);

}  // namespace dtr
