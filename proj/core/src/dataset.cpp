#include "dtr/dataset.hpp"

#include <fstream>

#include "json.hpp"

#include "dtr/config.hpp"
#include "dtr/errors.hpp"
#include "dtr/rng.hpp"

namespace dtr {

using nlohmann::json;

Dataset::Dataset(std::vector<Passage> passages, std::vector<QaExample> examples)
    : passages_(std::move(passages)), examples_(std::move(examples)) {
    for (std::size_t i = 0; i < passages_.size(); ++i) {
        if (!index_.emplace(passages_[i].id, i).second) {
            throw DataError("duplicate passage id " + std::to_string(passages_[i].id));
        }
    }
    for (const auto& ex : examples_) {
        const Passage& p = passage(ex.passage_id);
        if (ex.is_no_answer()) continue;
        const auto begin = static_cast<std::uint32_t>(ex.question.size() + 2);
        const auto end = static_cast<std::uint32_t>(begin + p.tokens.size());
        if (ex.gold_start > ex.gold_end || ex.gold_start < begin || ex.gold_end >= end) {
            throw DataError("gold span (" + std::to_string(ex.gold_start) + ", " + std::to_string(ex.gold_end) +
                            ") invalid for passage " + std::to_string(ex.passage_id));
        }
    }
}

const Passage& Dataset::passage(std::uint64_t id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw NotFoundError("unknown passage id " + std::to_string(id));
    return passages_[it->second];
}

Dataset Dataset::head(std::size_t count) const {
    count = std::min(count, examples_.size());
    return Dataset(passages_, {examples_.begin(), examples_.begin() + static_cast<std::ptrdiff_t>(count)});
}

Dataset Dataset::tail(std::size_t count) const {
    count = std::min(count, examples_.size());
    return Dataset(passages_, {examples_.begin() + static_cast<std::ptrdiff_t>(count), examples_.end()});
}

std::string token_text(std::int32_t token) {
    switch (token) {
        case kPadToken: return "[PAD]";
        case kClsToken: return "[CLS]";
        case kSepToken: return "[SEP]";
        default: return "w" + std::to_string(token);
    }
}

std::string tokens_text(std::span<const std::int32_t> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += token_text(tokens[i]);
    }
    return out;
}

void SyntheticTaskSpec::validate() const {
    if (vocab_size < static_cast<std::uint32_t>(kFirstContentToken) + 2) {
        throw ConfigError("synthetic task: vocab_size must leave at least two content ids");
    }
    if (min_answer_len < 1 || min_answer_len > max_answer_len) {
        throw ConfigError("synthetic task: answer length range must satisfy 1 <= min <= max");
    }
    if (min_passage_len > max_passage_len) throw ConfigError("synthetic task: min_passage_len > max_passage_len");
    if (min_passage_len < 1 + max_answer_len) {
        throw ConfigError("synthetic task: passages of " + std::to_string(min_passage_len) +
                          " tokens cannot host a key plus a " + std::to_string(max_answer_len) + "-token answer");
    }
    if (!(key_present_prob >= 0.0 && key_present_prob <= 1.0)) {
        throw ConfigError("synthetic task: key_present_prob must lie in [0, 1]");
    }
}

std::uint32_t SyntheticTaskSpec::answer_length(std::int32_t key) const {
    const std::uint32_t span = max_answer_len - min_answer_len + 1;
    return min_answer_len + static_cast<std::uint32_t>(key) % span;
}

Dataset generate_synthetic(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t first_passage_id) {
    spec.validate();
    const CounterRng root = CounterRng(spec.seed).split("synthetic");
    const std::uint32_t content = spec.vocab_size - static_cast<std::uint32_t>(kFirstContentToken);
    std::vector<Passage> passages;
    std::vector<QaExample> examples;
    passages.reserve(n);
    examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        CounterRng rng = root.split(static_cast<std::uint64_t>(i));
        const std::uint32_t len =
            spec.min_passage_len + static_cast<std::uint32_t>(rng.below(spec.max_passage_len - spec.min_passage_len + 1));
        const auto key = static_cast<std::int32_t>(kFirstContentToken + rng.below(content));
        const bool present = rng.uniform() < spec.key_present_prob;

        Passage p;
        p.id = first_passage_id + i;
        p.tokens.resize(len);
        for (auto& t : p.tokens) {
            // Content ids other than the key.
            auto draw = static_cast<std::int32_t>(kFirstContentToken + rng.below(content - 1));
            if (draw >= key) ++draw;
            t = draw;
        }
        QaExample ex;
        ex.question = {key};
        ex.passage_id = p.id;
        if (present) {
            const std::uint32_t answer = spec.answer_length(key);
            const std::uint32_t pos = static_cast<std::uint32_t>(rng.below(len - answer));
            p.tokens[pos] = key;
            const std::uint32_t offset = static_cast<std::uint32_t>(ex.question.size()) + 2;
            ex.gold_start = offset + pos + 1;
            ex.gold_end = ex.gold_start + answer - 1;
        }
        p.text = tokens_text(p.tokens);
        passages.push_back(std::move(p));
        examples.push_back(std::move(ex));
    }
    return Dataset(std::move(passages), std::move(examples));
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
    std::ifstream in(path, std::ios::binary);
    if (!std::filesystem::exists(path)) throw NotFoundError("no such file: " + path.string());
    if (!in) throw DataError("cannot read " + path.string());
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            f(json::parse(line));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

}  // namespace

void write_examples(const std::filesystem::path& path, const Dataset& dataset) {
    auto out = open_out(path);
    for (const auto& ex : dataset.examples()) {
        json j = {{"question", ex.question},
                  {"passage_id", ex.passage_id},
                  {"gold_start", ex.gold_start},
                  {"gold_end", ex.gold_end}};
        out << j.dump() << '\n';
    }
}

void write_passages(const std::filesystem::path& path, std::span<const Passage> passages) {
    auto out = open_out(path);
    for (const auto& p : passages) {
        json j = {{"id", p.id}, {"tokens", p.tokens}, {"text", p.text}};
        out << j.dump() << '\n';
    }
}

std::vector<Passage> read_passages(const std::filesystem::path& path) {
    std::vector<Passage> passages;
    for_each_line(path, [&](const json& j) {
        Passage p;
        p.id = j.at("id").get<std::uint64_t>();
        p.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
        p.text = j.at("text").get<std::string>();
        passages.push_back(std::move(p));
    });
    return passages;
}

Dataset read_dataset(const std::filesystem::path& examples_path, const std::filesystem::path& passages_path) {
    std::vector<QaExample> examples;
    for_each_line(examples_path, [&](const json& j) {
        QaExample ex;
        ex.question = j.at("question").get<std::vector<std::int32_t>>();
        ex.passage_id = j.at("passage_id").get<std::uint64_t>();
        ex.gold_start = j.at("gold_start").get<std::uint32_t>();
        ex.gold_end = j.at("gold_end").get<std::uint32_t>();
        examples.push_back(std::move(ex));
    });
    return Dataset(read_passages(passages_path), std::move(examples));
}

}  // namespace dtr
