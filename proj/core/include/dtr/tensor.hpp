#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dtr/errors.hpp"

namespace dtr {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
}

/// Dense row-major array. Rank 0..3 in practice; most activations are
/// [rows, cols] with rows = batch * sequence.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(shape_size(shape_), T{0}) {}

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != shape_size(shape_)) {
            throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                             std::to_string(values_.size()) + " values");
        }
    }

    static Tensor filled(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.values_.begin(), t.values_.end(), value);
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    // Rank-1 tensors read as a single row.
    std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
    std::size_t cols() const noexcept {
        if (shape_.empty()) return 1;
        return shape_.size() >= 2 ? size() / shape_[0] : shape_[0];
    }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    T* data() noexcept { return values_.data(); }
    const T* data() const noexcept { return values_.data(); }

    std::span<T> row(std::size_t r) noexcept { return {values_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {values_.data() + r * cols(), cols()}; }

    T& operator[](std::size_t i) noexcept { return values_[i]; }
    const T& operator[](std::size_t i) const noexcept { return values_[i]; }
    T& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols() + c]; }

    T item() const {
        if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return values_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), values_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(values_.begin(), values_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T value) { std::fill(values_.begin(), values_.end(), value); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<T> values_;
};

// Throws ShapeError naming both shapes when they differ.
void require_same_shape(const Shape& a, const Shape& b, const char* op);

template <typename T>
bool all_finite(const Tensor<T>& t);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace dtr
