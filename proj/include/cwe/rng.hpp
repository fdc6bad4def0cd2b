#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace cwe {

// Deterministic RNG used everywhere randomness is needed. std::mt19937_64's
// raw output sequence is fixed by the standard; the distributions here are
// hand-rolled because the std::*_distribution wrappers are
// implementation-defined and would break cross-toolchain reproducibility.
class DetRng {
 public:
  explicit DetRng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  // Derive an independent stream, e.g. per batch: rng.derive(batch_index).
  DetRng derive(std::uint64_t stream) const {
    return DetRng(seed_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, bound). Rejection sampling keeps it unbiased.
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % bound;
  }

  // Standard normal via Box-Muller (no cached spare: keeps the draw count
  // predictable).
  double next_normal() {
    double u1;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Normal(0, stddev) truncated to +-2 stddev, by rejection.
  double next_trunc_normal(double stddev) {
    double v;
    do {
      v = next_normal();
    } while (v < -2.0 || v > 2.0);
    return v * stddev;
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

}  // namespace cwe
