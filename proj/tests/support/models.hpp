#pragma once

#include <map>
#include <string>

#include "dtr/decoupled.hpp"
#include "dtr/transformer.hpp"

namespace dtr::testing {

template <typename Model>
std::map<std::string, Tensor<float>> snapshot(const Model& model) {
    std::map<std::string, Tensor<float>> out;
    visit_parameters(model, [&](const std::string& name, const Tensor<float>& t, std::uint32_t) { out.emplace(name, t); });
    return out;
}

// Names whose tensors differ between two snapshots.
inline std::vector<std::string> changed(const std::map<std::string, Tensor<float>>& a,
                                        const std::map<std::string, Tensor<float>>& b) {
    std::vector<std::string> out;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || !(it->second == t)) out.push_back(name);
    }
    return out;
}

}  // namespace dtr::testing
