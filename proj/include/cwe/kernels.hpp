#pragma once

#include <cstddef>
#include <string>

namespace cwe::kernels {

// Data-parallel inner loops used by the encoder and the clustering code.
// Scalar reference implementations always exist; an AVX2/FMA variant is
// selected at runtime when the CPU supports it. The two lanes are
// equivalence-tested against each other (reduction order differs, so
// comparisons are tolerance-based). Set CWE_KERNELS=scalar|avx2 to force a
// lane.
struct KernelTable {
  const char* name;
  float (*dot)(const float* a, const float* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
  // x *= alpha
  void (*scale)(float* x, float alpha, std::size_t n);
  float (*reduce_sum)(const float* x, std::size_t n);
  float (*reduce_max)(const float* x, std::size_t n);
  // sum over i of (x[i] - mu)^2
  float (*sq_diff_sum)(const float* x, float mu, std::size_t n);
  // out[i] = (x[i] - mu) * rstd * gamma[i] + beta[i]
  void (*ln_affine)(const float* x, float mu, float rstd, const float* gamma,
                    const float* beta, float* out, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the binary was built without the AVX2 TU or the CPU lacks
// AVX2+FMA.
const KernelTable* avx2_table();

// Runtime-selected lane; fixed for the process lifetime.
const KernelTable& active();

// Generic scalar fallbacks so the float64 verification path shares no code
// with the dispatched float32 path.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
inline void scale(T* x, T alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <class T>
inline T reduce_sum(const T* x, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <class T>
inline T reduce_max(const T* x, std::size_t n) {
  T best = x[0];
  for (std::size_t i = 1; i < n; ++i) best = x[i] > best ? x[i] : best;
  return best;
}

template <class T>
inline T sq_diff_sum(const T* x, T mu, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = x[i] - mu;
    acc += d * d;
  }
  return acc;
}

template <class T>
inline void ln_affine(const T* x, T mu, T rstd, const T* gamma, const T* beta,
                      T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (x[i] - mu) * rstd * gamma[i] + beta[i];
  }
}

// float overloads route through the dispatched lane.
inline float dot(const float* a, const float* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline void axpy(float alpha, const float* x, float* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline void scale(float* x, float alpha, std::size_t n) {
  active().scale(x, alpha, n);
}
inline float reduce_sum(const float* x, std::size_t n) {
  return active().reduce_sum(x, n);
}
inline float reduce_max(const float* x, std::size_t n) {
  return active().reduce_max(x, n);
}
inline float sq_diff_sum(const float* x, float mu, std::size_t n) {
  return active().sq_diff_sum(x, mu, n);
}
inline void ln_affine(const float* x, float mu, float rstd, const float* gamma,
                      const float* beta, float* out, std::size_t n) {
  active().ln_affine(x, mu, rstd, gamma, beta, out, n);
}

}  // namespace cwe::kernels
