#include "mia/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <string>

#include "kernels_internal.hpp"
#include "mia/util.hpp"

namespace mia::kernels {

namespace detail {

void softmax_row_shared(double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > m) m = x[i];
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - m);
    s += x[i];
  }
  const double inv = 1.0 / s;
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

void gelu_shared(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double t = x[i];
    y[i] = 0.5 * t * (1.0 + std::tanh(kGeluC * (t + 0.044715 * t * t * t)));
  }
}

void gelu_grad_shared(const double* x, const double* dy, double* dx,
                      std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double t = x[i];
    const double u = kGeluC * (t + 0.044715 * t * t * t);
    const double th = std::tanh(u);
    const double sech2 = 1.0 - th * th;
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * t * t);
    const double grad = 0.5 * (1.0 + th) + 0.5 * t * sech2 * du;
    dx[i] += dy[i] * grad;
  }
}

}  // namespace detail

namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double* x, double alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void vadd_scalar(const double* a, const double* b, double* out,
                 std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

double reduce_max_scalar(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

double reduce_sum_scalar(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

void gemm_nn_scalar(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt_scalar(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = dot_scalar(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

void gemm_tn_scalar(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
  for (std::size_t l = 0; l < k; ++l) {
    const double* arow = a + l * m;
    const double* brow = b + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void adam_update_scalar(double* p, const double* g, double* m, double* v,
                        std::size_t n, double lr, double beta1, double beta2,
                        double eps, double bc1, double bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

const Ops kScalarOps = {
    "scalar",
    dot_scalar,
    axpy_scalar,
    scale_scalar,
    vadd_scalar,
    reduce_max_scalar,
    reduce_sum_scalar,
    gemm_nn_scalar,
    gemm_nt_scalar,
    gemm_tn_scalar,
    adam_update_scalar,
    detail::softmax_row_shared,
    detail::gelu_shared,
    detail::gelu_grad_shared,
};

}  // namespace

const Ops& scalar_ops() { return kScalarOps; }

#if !defined(MIA_HAVE_AVX2)
const Ops* avx2_ops() { return nullptr; }
#endif

const Ops& active() {
  static const Ops* selected = []() -> const Ops* {
    const char* env = std::getenv("MIA_KERNELS");
    if (env != nullptr) {
      std::string want(env);
      if (want == "scalar") return &kScalarOps;
      if (want == "avx2") {
        const Ops* simd = avx2_ops();
        if (simd == nullptr)
          throw ConfigError("MIA_KERNELS=avx2 requested but AVX2 unavailable");
        return simd;
      }
      throw ConfigError("unknown MIA_KERNELS value: " + want);
    }
    const Ops* simd = avx2_ops();
    return simd != nullptr ? simd : &kScalarOps;
  }();
  return *selected;
}

}  // namespace mia::kernels
