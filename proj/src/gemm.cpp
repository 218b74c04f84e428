#include "dualse/gemm.hpp"

#include <cblas.h>

namespace dualse {

namespace {

// Small-problem fallback; BLAS call overhead dominates below this.
constexpr int64_t kSmallMacs = 1 << 16;

template <typename S>
void gemm_naive(bool ta, bool tb, int64_t m, int64_t n, int64_t k, S alpha, const S* a,
                int64_t lda, const S* b, int64_t ldb, S beta, S* c, int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * ldc;
    if (beta == S(0)) {
      for (int64_t j = 0; j < n; ++j) crow[j] = S(0);
    } else if (beta != S(1)) {
      for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int64_t p = 0; p < k; ++p) {
      const S av = alpha * (ta ? a[p * lda + i] : a[i * lda + p]);
      if (av == S(0)) continue;
      const S* brow = tb ? nullptr : b + p * ldb;
      if (!tb) {
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      }
    }
  }
}

}  // namespace

void gemm_f32(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
              const float* a, int64_t lda, const float* b, int64_t ldb, float beta,
              float* c, int64_t ldc) {
  if (m * n * k <= kSmallMacs) {
    gemm_naive(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void gemm_f64(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha,
              const double* a, int64_t lda, const double* b, int64_t ldb, double beta,
              double* c, int64_t ldc) {
  if (m * n * k <= kSmallMacs) {
    gemm_naive(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

}  // namespace dualse
