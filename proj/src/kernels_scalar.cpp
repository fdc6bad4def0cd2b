#include "cwe/kernels.hpp"

namespace cwe::kernels {

namespace {

float s_dot(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void s_axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void s_scale(float* x, float alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

float s_reduce_sum(const float* x, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

float s_reduce_max(const float* x, std::size_t n) {
  float best = x[0];
  for (std::size_t i = 1; i < n; ++i) best = x[i] > best ? x[i] : best;
  return best;
}

float s_sq_diff_sum(const float* x, float mu, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const float d = x[i] - mu;
    acc += d * d;
  }
  return acc;
}

void s_ln_affine(const float* x, float mu, float rstd, const float* gamma,
                 const float* beta, float* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (x[i] - mu) * rstd * gamma[i] + beta[i];
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table = {
      "scalar",       s_dot,         s_axpy,      s_scale,
      s_reduce_sum,   s_reduce_max,  s_sq_diff_sum, s_ln_affine,
  };
  return table;
}

}  // namespace cwe::kernels
