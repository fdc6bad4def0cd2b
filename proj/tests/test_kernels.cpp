#include <cmath>
#include <vector>

#include "cwe/kernels.hpp"
#include "cwe/rng.hpp"
#include "doctest.h"

using cwe::DetRng;
namespace k = cwe::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, DetRng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.next_double() * 2.0 - 1.0);
  return v;
}

bool close(float a, float b, float rel = 1e-4f) {
  const float scale = std::max({1.0f, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) <= rel * scale;
}

}  // namespace

TEST_CASE("scalar and simd lanes agree on every kernel") {
  const k::KernelTable* simd = k::avx2_table();
  if (simd == nullptr) {
    MESSAGE("AVX2 lane unavailable; equivalence check skipped");
    return;
  }
  const k::KernelTable& ref = k::scalar_table();
  DetRng rng(7);
  // Sizes straddle the 8-lane width to hit every remainder path.
  for (std::size_t n : {1u, 3u, 7u, 8u, 9u, 16u, 31u, 64u, 257u, 1000u}) {
    auto a = random_vec(n, rng);
    auto b = random_vec(n, rng);

    CHECK(close(ref.dot(a.data(), b.data(), n),
                simd->dot(a.data(), b.data(), n)));
    CHECK(close(ref.reduce_sum(a.data(), n), simd->reduce_sum(a.data(), n)));
    CHECK(ref.reduce_max(a.data(), n) == simd->reduce_max(a.data(), n));
    CHECK(close(ref.sq_diff_sum(a.data(), 0.25f, n),
                simd->sq_diff_sum(a.data(), 0.25f, n)));

    auto y1 = b;
    auto y2 = b;
    ref.axpy(0.37f, a.data(), y1.data(), n);
    simd->axpy(0.37f, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(close(y1[i], y2[i]));

    auto s1 = a;
    auto s2 = a;
    ref.scale(s1.data(), -1.75f, n);
    simd->scale(s2.data(), -1.75f, n);
    for (std::size_t i = 0; i < n; ++i) CHECK(close(s1[i], s2[i]));

    auto gamma = random_vec(n, rng);
    auto beta = random_vec(n, rng);
    std::vector<float> o1(n), o2(n);
    ref.ln_affine(a.data(), 0.1f, 1.3f, gamma.data(), beta.data(), o1.data(),
                  n);
    simd->ln_affine(a.data(), 0.1f, 1.3f, gamma.data(), beta.data(),
                    o2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(close(o1[i], o2[i]));
  }
}

TEST_CASE("scalar kernels match plain arithmetic") {
  const k::KernelTable& ref = k::scalar_table();
  std::vector<float> a = {1.0f, -2.0f, 3.0f};
  std::vector<float> b = {0.5f, 4.0f, -1.0f};
  CHECK(ref.dot(a.data(), b.data(), 3) == doctest::Approx(-10.5));
  CHECK(ref.reduce_sum(a.data(), 3) == doctest::Approx(2.0));
  CHECK(ref.reduce_max(a.data(), 3) == doctest::Approx(3.0));
  CHECK(ref.sq_diff_sum(a.data(), 1.0f, 3) == doctest::Approx(0 + 9 + 4));
}

TEST_CASE("the dispatched lane is one of the registered tables") {
  const k::KernelTable& table = k::active();
  const bool is_scalar = &table == &k::scalar_table();
  const bool is_avx2 = k::avx2_table() != nullptr && &table == k::avx2_table();
  CHECK((is_scalar || is_avx2));
  MESSAGE("active kernel lane: ", std::string(table.name));
}
