#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace dtr::detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> mat(T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return MatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
template <typename T>
ConstMatMap<T> cmat(const T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return ConstMatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                          Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

// c = a [m,k] * b [k,n]; all dense row-major.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    auto C = mat(c, m, n, n);
    if (accumulate) {
        C.noalias() += cmat(a, m, k, k) * cmat(b, k, n, n);
    } else {
        C.noalias() = cmat(a, m, k, k) * cmat(b, k, n, n);
    }
}

// c += a^T * b with a [m,k], b [m,n] -> c [k,n]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    mat(c, k, n, n).noalias() += cmat(a, m, k, k).transpose() * cmat(b, m, n, n);
}

// c += a * b^T with a [m,n], b [k,n] -> c [m,k]
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    mat(c, m, k, k).noalias() += cmat(a, m, n, n) * cmat(b, k, n, n).transpose();
}

}  // namespace dtr::detail
