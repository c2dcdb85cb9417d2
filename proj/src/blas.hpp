#pragma once

// Row-major GEMM wrapper: C = alpha op(A) op(B) + beta C with op(A) M x K and op(B) K x N.

#include <Eigen/Core>

#include <cstdint>

namespace xmod::detail {

template <typename T>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, T alpha, const T* a, const T* b, T beta,
          T* c) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (m == 0 || n == 0) return;
    Eigen::Map<Mat> C(c, m, n);
    if (beta == T{0}) C.setZero();
    else if (beta != T{1}) C *= beta;
    if (k == 0) return;
    // A stored transposed is (k x m) row-major; likewise for B.
    Eigen::Map<const Mat> A(a, ta ? k : m, ta ? m : k);
    Eigen::Map<const Mat> B(b, tb ? n : k, tb ? k : n);
    if (!ta && !tb) C.noalias() += alpha * A * B;
    else if (ta && !tb) C.noalias() += alpha * A.transpose() * B;
    else if (!ta && tb) C.noalias() += alpha * A * B.transpose();
    else C.noalias() += alpha * A.transpose() * B.transpose();
}

}  // namespace xmod::detail
