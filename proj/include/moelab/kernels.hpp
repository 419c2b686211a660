// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels used by the router and the experts. Every kernel has a
// serial reference and an OpenMP version; the OpenMP versions split work
// over output elements only and keep each element's reduction in serial
// row order, so both produce bit-identical results.

#pragma once

#include "moelab/core.hpp"

namespace moelab::kernels {

namespace serial {

/// C = A * B.
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B with inputs rounded to float and float accumulation.
Matrix matmul_f32(const Matrix& a, const Matrix& b);
/// C = A * B^T.
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);
/// C += A^T * B, accumulating over the rows of A and B in order.
void accumulate_at_b(Matrix& c, const Matrix& a, const Matrix& b);

}  // namespace serial

namespace omp {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_f32(const Matrix& a, const Matrix& b);
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);
void accumulate_at_b(Matrix& c, const Matrix& a, const Matrix& b);

}  // namespace omp

/// True when the library was built with OpenMP.
bool openmp_enabled() noexcept;

// Default entry points; forward to the OpenMP versions when available.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_f32(const Matrix& a, const Matrix& b);
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);
void accumulate_at_b(Matrix& c, const Matrix& a, const Matrix& b);

}  // namespace moelab::kernels
