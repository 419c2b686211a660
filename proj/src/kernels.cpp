// SPDX-License-Identifier: Apache-2.0

#include "moelab/kernels.hpp"

#include <string>

#ifdef MOELAB_WITH_OPENMP
#include <omp.h>
#endif

namespace moelab::kernels {

namespace {

// Below this many multiply-adds the thread fan-out costs more than it saves.
constexpr long kParallelThreshold = 1L << 15;

void check_matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
}

void check_a_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_a_bt: column counts differ (" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.cols()) + ")");
}

void check_at_b(const Matrix& c, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols())
        throw ShapeError("accumulate_at_b: shape mismatch");
}

inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t k = a.cols(), m = b.cols();
    double* out = c.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) out[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double av = a(i, p);
        const double* brow = b.data() + p * m;
        for (std::size_t j = 0; j < m; ++j) out[j] += av * brow[j];
    }
}

inline void matmul_f32_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t k = a.cols(), m = b.cols();
    for (std::size_t j = 0; j < m; ++j) {
        float acc = 0.0f;
        for (std::size_t p = 0; p < k; ++p)
            acc += static_cast<float>(a(i, p)) * static_cast<float>(b(p, j));
        c(i, j) = static_cast<double>(acc);
    }
}

inline void a_bt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t k = a.cols();
    const double* arow = a.data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
        const double* brow = b.data() + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c(i, j) = acc;
    }
}

inline void at_b_row(Matrix& c, const Matrix& a, const Matrix& b, std::size_t p) {
    const std::size_t q = b.cols();
    double* out = c.data() + p * q;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double av = a(r, p);
        if (av == 0.0) continue;
        const double* brow = b.data() + r * q;
        for (std::size_t j = 0; j < q; ++j) out[j] += av * brow[j];
    }
}

}  // namespace

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_matmul(a, b);
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
    return c;
}

Matrix matmul_f32(const Matrix& a, const Matrix& b) {
    check_matmul(a, b);
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) matmul_f32_row(a, b, c, i);
    return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
    check_a_bt(a, b);
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) a_bt_row(a, b, c, i);
    return c;
}

void accumulate_at_b(Matrix& c, const Matrix& a, const Matrix& b) {
    check_at_b(c, a, b);
    for (std::size_t p = 0; p < a.cols(); ++p) at_b_row(c, a, b, p);
}

}  // namespace serial

namespace omp {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_matmul(a, b);
    Matrix c(a.rows(), b.cols());
    const long n = static_cast<long>(a.rows());
    [[maybe_unused]] const bool big = n * static_cast<long>(a.cols() * b.cols()) >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (long i = 0; i < n; ++i) matmul_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

Matrix matmul_f32(const Matrix& a, const Matrix& b) {
    check_matmul(a, b);
    Matrix c(a.rows(), b.cols());
    const long n = static_cast<long>(a.rows());
    [[maybe_unused]] const bool big = n * static_cast<long>(a.cols() * b.cols()) >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (long i = 0; i < n; ++i) matmul_f32_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
    check_a_bt(a, b);
    Matrix c(a.rows(), b.rows());
    const long n = static_cast<long>(a.rows());
    [[maybe_unused]] const bool big = n * static_cast<long>(a.cols() * b.rows()) >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (long i = 0; i < n; ++i) a_bt_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

void accumulate_at_b(Matrix& c, const Matrix& a, const Matrix& b) {
    check_at_b(c, a, b);
    const long n = static_cast<long>(a.cols());
    [[maybe_unused]] const bool big = n * static_cast<long>(a.rows() * b.cols()) >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (long p = 0; p < n; ++p) at_b_row(c, a, b, static_cast<std::size_t>(p));
}

}  // namespace omp

bool openmp_enabled() noexcept {
#ifdef MOELAB_WITH_OPENMP
    return true;
#else
    return false;
#endif
}

Matrix matmul(const Matrix& a, const Matrix& b) { return omp::matmul(a, b); }
Matrix matmul_f32(const Matrix& a, const Matrix& b) { return omp::matmul_f32(a, b); }
Matrix matmul_a_bt(const Matrix& a, const Matrix& b) { return omp::matmul_a_bt(a, b); }
void accumulate_at_b(Matrix& c, const Matrix& a, const Matrix& b) { omp::accumulate_at_b(c, a, b); }

}  // namespace moelab::kernels
