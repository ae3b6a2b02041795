#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dtr/graph.hpp"

namespace dtr::testing {

using Builder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
    double worst_relative_error = 0.0;
    std::size_t worst_input = 0;
};

// Central differences in double precision against the graph's analytic
// gradients. Error is measured per input tensor as
// max|analytic - numeric| / max(max|analytic|, max|numeric|).
inline GradCheckResult grad_check(const std::vector<Tensor<double>>& inputs, const Builder& build,
                                  double step = 1e-3) {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.variable(t));
    Var<double> loss = build(g, leaves);
    g.backward(loss);

    auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
        Graph<double> probe(false);
        std::vector<Var<double>> vs;
        for (const auto& t : xs) vs.push_back(probe.constant(t));
        return build(probe, vs).value().item();
    };

    GradCheckResult result;
    std::vector<Tensor<double>> work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<double>* analytic = g.grad(leaves[i]);
        double max_diff = 0.0, scale = 0.0;
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double saved = work[i][j];
            work[i][j] = saved + step;
            const double up = evaluate(work);
            work[i][j] = saved - step;
            const double down = evaluate(work);
            work[i][j] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic ? (*analytic)[j] : 0.0;
            max_diff = std::max(max_diff, std::abs(a - numeric));
            scale = std::max({scale, std::abs(a), std::abs(numeric)});
        }
        const double rel = scale > 0.0 ? max_diff / scale : 0.0;
        if (rel > result.worst_relative_error) {
            result.worst_relative_error = rel;
            result.worst_input = i;
        }
    }
    return result;
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    CounterRng rng(seed);
    for (double& v : t.values()) v = rng.normal() * scale;
    return t;
}

}  // namespace dtr::testing
