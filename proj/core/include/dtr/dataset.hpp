#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dtr {

struct Passage {
    std::uint64_t id = 0;
    std::vector<std::int32_t> tokens;
    std::string text;  // space-joined surface form of the tokens

    friend bool operator==(const Passage&, const Passage&) = default;
};

/// One labelled question. The gold span is in pair-layout coordinates
/// ([CLS] question [SEP] passage [SEP]); (0, 0) is the no-answer span.
struct QaExample {
    std::vector<std::int32_t> question;
    std::uint64_t passage_id = 0;
    std::uint32_t gold_start = 0;
    std::uint32_t gold_end = 0;

    bool is_no_answer() const { return gold_start == 0 && gold_end == 0; }
    friend bool operator==(const QaExample&, const QaExample&) = default;
};

class Dataset {
public:
    Dataset() = default;
    Dataset(std::vector<Passage> passages, std::vector<QaExample> examples);

    const std::vector<Passage>& passages() const noexcept { return passages_; }
    const std::vector<QaExample>& examples() const noexcept { return examples_; }
    std::size_t size() const noexcept { return examples_.size(); }
    bool empty() const noexcept { return examples_.empty(); }

    // Throws NotFoundError for unknown ids.
    const Passage& passage(std::uint64_t id) const;

    // First `count` examples, and everything from `count` on; passages are
    // shared.
    Dataset head(std::size_t count) const;
    Dataset tail(std::size_t count) const;

private:
    std::vector<Passage> passages_;
    std::vector<QaExample> examples_;
    std::unordered_map<std::uint64_t, std::size_t> index_;
};

std::string token_text(std::int32_t token);
std::string tokens_text(std::span<const std::int32_t> tokens);

/// Key-lookup reading task. Each example has its own passage of random
/// content ids. With probability key_present_prob a key token k is placed
/// once and the answer is the run of tokens right after it; its length is
/// min_answer_len + k mod (max_answer_len - min_answer_len + 1), so the
/// question alone determines it. The question is [k]. Otherwise k does not
/// occur in the passage and the gold span is (0, 0).
struct SyntheticTaskSpec {
    std::uint32_t vocab_size = 48;
    std::uint32_t min_passage_len = 12;
    std::uint32_t max_passage_len = 24;
    double key_present_prob = 0.7;
    std::uint32_t min_answer_len = 1;
    std::uint32_t max_answer_len = 3;
    std::uint64_t seed = 0;

    void validate() const;
    std::uint32_t answer_length(std::int32_t key) const;
};

// Example i draws from stream split(i) of the task seed; passage ids are
// first_passage_id + i.
Dataset generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t first_passage_id = 0);

// Line-delimited JSON: {"question":[..],"passage_id":..,"gold_start":..,"gold_end":..}
void write_examples(const std::filesystem::path& path, const Dataset& dataset);
// Line-delimited JSON sidecar: {"id":..,"tokens":[..],"text":".."}
void write_passages(const std::filesystem::path& path, std::span<const Passage> passages);
std::vector<Passage> read_passages(const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& examples_path, const std::filesystem::path& passages_path);

}  // namespace dtr
