#pragma once

#include <cstdint>
#include <string>

namespace dtr {

// Reserved token ids shared by the encoder layout and the synthetic task.
inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kClsToken = 1;
inline constexpr std::int32_t kSepToken = 2;
inline constexpr std::int32_t kFirstContentToken = 3;

struct ModelConfig {
    std::uint32_t n_layers = 12;
    std::uint32_t hidden = 768;
    std::uint32_t heads = 12;
    std::uint32_t ffn = 3072;
    std::uint32_t vocab = 30522;
    std::uint32_t max_positions = 512;
    std::uint32_t n_segments = 2;
    float dropout = 0.1f;
    float attention_dropout = 0.1f;

    // Throws ConfigError when the configuration cannot describe a model.
    void validate() const;
    std::uint32_t head_dim() const { return hidden / heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// x-y split: x input-component layers, y cross-component layers.
struct SplitSpec {
    std::uint32_t input_layers = 0;
    std::uint32_t cross_layers = 0;

    std::uint32_t total() const { return input_layers + cross_layers; }
    // Throws ConfigError unless both sides have at least one layer and,
    // when depth > 0, they add up to it.
    void validate(std::uint32_t depth = 0) const;

    // Parses "5-7".
    static SplitSpec parse(const std::string& text);
    std::string to_string() const;

    friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

}  // namespace dtr
