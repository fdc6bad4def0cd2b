#include <immintrin.h>

#include "cwe/kernels.hpp"

// AVX2+FMA variants of the float32 kernels. This TU is the only one compiled
// with -mavx2 -mfma; callers reach it through the dispatch table after a
// runtime CPU check.

namespace cwe::kernels {

namespace {

float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

float hmax256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_max_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 m = _mm_max_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, m);
  m = _mm_max_ss(m, shuf);
  return _mm_cvtss_f32(m);
}

float v_dot(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  }
  float sum = hsum256(acc);
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

void v_axpy(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void v_scale(float* x, float alpha, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), va));
  }
  for (; i < n; ++i) x[i] *= alpha;
}

float v_reduce_sum(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float sum = hsum256(acc);
  for (; i < n; ++i) sum += x[i];
  return sum;
}

float v_reduce_max(const float* x, std::size_t n) {
  if (n < 8) {
    float best = x[0];
    for (std::size_t i = 1; i < n; ++i) best = x[i] > best ? x[i] : best;
    return best;
  }
  __m256 acc = _mm256_loadu_ps(x);
  std::size_t i = 8;
  for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
  float best = hmax256(acc);
  for (; i < n; ++i) best = x[i] > best ? x[i] : best;
  return best;
}

float v_sq_diff_sum(const float* x, float mu, std::size_t n) {
  const __m256 vmu = _mm256_set1_ps(mu);
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 d = _mm256_sub_ps(_mm256_loadu_ps(x + i), vmu);
    acc = _mm256_fmadd_ps(d, d, acc);
  }
  float sum = hsum256(acc);
  for (; i < n; ++i) {
    const float d = x[i] - mu;
    sum += d * d;
  }
  return sum;
}

void v_ln_affine(const float* x, float mu, float rstd, const float* gamma,
                 const float* beta, float* out, std::size_t n) {
  const __m256 vmu = _mm256_set1_ps(mu);
  const __m256 vr = _mm256_set1_ps(rstd);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xhat =
        _mm256_mul_ps(_mm256_sub_ps(_mm256_loadu_ps(x + i), vmu), vr);
    __m256 o = _mm256_fmadd_ps(xhat, _mm256_loadu_ps(gamma + i),
                               _mm256_loadu_ps(beta + i));
    _mm256_storeu_ps(out + i, o);
  }
  for (; i < n; ++i) {
    out[i] = (x[i] - mu) * rstd * gamma[i] + beta[i];
  }
}

const KernelTable avx2_kernels = {
    "avx2",         v_dot,         v_axpy,        v_scale,
    v_reduce_sum,   v_reduce_max,  v_sq_diff_sum, v_ln_affine,
};

}  // namespace

const KernelTable* avx2_table_impl() { return &avx2_kernels; }

}  // namespace cwe::kernels
