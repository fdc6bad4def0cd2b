#include <cstdlib>
#include <stdexcept>
#include <string>

#include "cwe/kernels.hpp"

namespace cwe::kernels {

#ifdef CWE_HAVE_AVX2_TU
const KernelTable* avx2_table_impl();
#endif

const KernelTable* avx2_table() {
#ifdef CWE_HAVE_AVX2_TU
#if defined(__x86_64__) || defined(__i386__)
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
    return avx2_table_impl();
  }
#endif
#endif
  return nullptr;
}

namespace {

const KernelTable& select() {
  const char* forced = std::getenv("CWE_KERNELS");
  if (forced != nullptr) {
    const std::string want = forced;
    if (want == "scalar") return scalar_table();
    if (want == "avx2") {
      const KernelTable* t = avx2_table();
      if (t == nullptr) {
        throw std::runtime_error(
            "CWE_KERNELS=avx2 requested but AVX2 is unavailable");
      }
      return *t;
    }
    throw std::runtime_error(std::string("unknown CWE_KERNELS value: ") +
                             forced);
  }
  const KernelTable* t = avx2_table();
  return t != nullptr ? *t : scalar_table();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

}  // namespace cwe::kernels
