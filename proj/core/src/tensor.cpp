#include "dtr/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace dtr {

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "max_abs_diff");
    T worst{0};
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace dtr
