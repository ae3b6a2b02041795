#include "dtr/config.hpp"

#include <charconv>

#include "dtr/errors.hpp"

namespace dtr {

void ModelConfig::validate() const {
    if (n_layers == 0) throw ConfigError("model config: n_layers must be >= 1");
    if (hidden == 0 || heads == 0) throw ConfigError("model config: hidden and heads must be >= 1");
    if (hidden % heads != 0) {
        throw ConfigError("model config: hidden " + std::to_string(hidden) + " is not divisible by heads " +
                          std::to_string(heads));
    }
    if (ffn == 0) throw ConfigError("model config: ffn must be >= 1");
    if (vocab <= static_cast<std::uint32_t>(kFirstContentToken)) {
        throw ConfigError("model config: vocab must leave room past the reserved ids 0..2");
    }
    if (max_positions == 0) throw ConfigError("model config: max_positions must be >= 1");
    if (n_segments != 2) throw ConfigError("model config: n_segments must be 2");
    if (!(dropout >= 0.0f && dropout < 1.0f) || !(attention_dropout >= 0.0f && attention_dropout < 1.0f)) {
        throw ConfigError("model config: dropout rates must lie in [0, 1)");
    }
}

void SplitSpec::validate(std::uint32_t depth) const {
    if (input_layers < 1 || cross_layers < 1) {
        throw ConfigError("split " + to_string() + ": both components need at least one layer");
    }
    if (depth != 0 && total() != depth) {
        throw ConfigError("split " + to_string() + " does not add up to the model depth " + std::to_string(depth));
    }
}

SplitSpec SplitSpec::parse(const std::string& text) {
    const auto dash = text.find('-');
    SplitSpec spec;
    auto parse_part = [&](std::string_view part, std::uint32_t& out) {
        const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
        if (ec != std::errc{} || ptr != part.data() + part.size() || part.empty()) {
            throw ConfigError("invalid split '" + text + "', expected the form X-Y such as 5-7");
        }
    };
    if (dash == std::string::npos) throw ConfigError("invalid split '" + text + "', expected the form X-Y such as 5-7");
    const std::string_view view(text);
    parse_part(view.substr(0, dash), spec.input_layers);
    parse_part(view.substr(dash + 1), spec.cross_layers);
    return spec;
}

std::string SplitSpec::to_string() const {
    return std::to_string(input_layers) + "-" + std::to_string(cross_layers);
}

}  // namespace dtr
