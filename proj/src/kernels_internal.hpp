#pragma once

#include <cstddef>

// Scalar kernels shared between the reference table and the AVX2 table
// (ops where a SIMD variant does not pay off).
namespace mia::kernels::detail {

void softmax_row_shared(double* x, std::size_t n);
void gelu_shared(const double* x, double* y, std::size_t n);
void gelu_grad_shared(const double* x, const double* dy, double* dx,
                      std::size_t n);

}  // namespace mia::kernels::detail
