#pragma once

#include <cstddef>

namespace mia::kernels {

// Double-precision kernels behind the model math. Two implementations
// exist: portable scalar reference kernels and AVX2/FMA variants compiled
// into a separate translation unit. The active table is chosen once at
// startup from CPU capabilities; MIA_KERNELS=scalar|avx2 overrides.
//
// Scalar and SIMD variants of the same kernel may round differently
// (different summation order); they are equivalence-tested against each
// other within tolerance, and within one process the dispatch is fixed,
// so every run on a given machine is deterministic.
//
// Matrix arguments are dense row-major.
struct Ops {
  const char* name;

  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x *= alpha
  void (*scale)(double* x, double alpha, std::size_t n);
  // out = a + b
  void (*vadd)(const double* a, const double* b, double* out, std::size_t n);
  double (*reduce_max)(const double* x, std::size_t n);
  double (*reduce_sum)(const double* x, std::size_t n);

  // C[m x n] = (accumulate ? C : 0) + A[m x k] * B[k x n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // C[m x n] = (accumulate ? C : 0) + A[m x k] * B^T, with B[n x k]
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // C[m x n] = (accumulate ? C : 0) + A^T * B, with A[k x m], B[k x n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);

  // Adam with bias-corrected moments; bc1 = 1 - beta1^t, bc2 = 1 - beta2^t.
  void (*adam_update)(double* p, const double* g, double* m, double* v,
                      std::size_t n, double lr, double beta1, double beta2,
                      double eps, double bc1, double bc2);

  // In-place softmax over one row (max-subtracted). Shared scalar code:
  // exp dominates, so no SIMD variant is provided.
  void (*softmax_row)(double* x, std::size_t n);
  // tanh-approximation GELU; dx += dy * gelu'(x)
  void (*gelu)(const double* x, double* y, std::size_t n);
  void (*gelu_grad)(const double* x, const double* dy, double* dx,
                    std::size_t n);
};

const Ops& scalar_ops();

// nullptr when the binary lacks AVX2 support or the CPU does not have it.
const Ops* avx2_ops();

// The runtime-selected table.
const Ops& active();

}  // namespace mia::kernels
