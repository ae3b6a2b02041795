#pragma once

#include <vector>

#include "dtr/config.hpp"
#include "dtr/rng.hpp"

namespace dtr::testing {

inline ModelConfig tiny_config(std::uint32_t layers = 2, std::uint32_t hidden = 8, std::uint32_t heads = 2) {
    ModelConfig c;
    c.n_layers = layers;
    c.hidden = hidden;
    c.heads = heads;
    c.ffn = hidden * 2;
    c.vocab = 20;
    c.max_positions = 64;
    c.dropout = 0.0f;
    c.attention_dropout = 0.0f;
    return c;
}

inline std::vector<std::int32_t> random_ids(std::size_t n, std::uint32_t vocab, CounterRng& rng) {
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = static_cast<std::int32_t>(kFirstContentToken + rng.below(vocab - kFirstContentToken));
    return ids;
}

}  // namespace dtr::testing
