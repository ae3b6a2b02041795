#include "dtr/rng.hpp"

#include <cmath>
#include <numbers>

namespace dtr {

double CounterRng::normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double CounterRng::truncated_normal(double stddev) noexcept {
    for (;;) {
        const double z = normal();
        if (std::abs(z) <= 2.0) return z * stddev;
    }
}

}  // namespace dtr
