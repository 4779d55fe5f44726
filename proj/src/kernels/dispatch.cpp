#include "kernels_internal.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace latentq::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(LATENTQ_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* resolve(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      return &detail::kScalarTable;
    case Backend::Avx2:
      return avx2_table();
    case Backend::Auto:
      if (const KernelTable* t = avx2_table()) return t;
      return &detail::kScalarTable;
  }
  return nullptr;
}

Backend backend_from_env() {
  const char* env = std::getenv("LATENTQ_KERNELS");
  if (env == nullptr) return Backend::Auto;
  const std::string value(env);
  if (value == "scalar") return Backend::Scalar;
  if (value == "avx2") return Backend::Avx2;
  if (value == "auto" || value.empty()) return Backend::Auto;
  throw std::runtime_error("LATENTQ_KERNELS must be one of scalar, avx2, auto; got '" + value + "'");
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{nullptr};
  return table;
}

}  // namespace

const KernelTable& scalar_table() { return detail::kScalarTable; }

const KernelTable* avx2_table() {
#if defined(LATENTQ_HAVE_AVX2)
  static const bool supported = cpu_has_avx2();
  return supported ? &detail::kAvx2Table : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() {
  const KernelTable* t = current().load(std::memory_order_acquire);
  if (t != nullptr) return *t;
  const Backend requested = backend_from_env();
  t = resolve(requested);
  if (t == nullptr) throw std::runtime_error("requested kernel backend is not available on this CPU");
  current().store(t, std::memory_order_release);
  return *t;
}

void select(Backend backend) {
  const KernelTable* t = resolve(backend);
  if (t == nullptr) throw std::runtime_error("requested kernel backend is not available on this CPU");
  current().store(t, std::memory_order_release);
}

}  // namespace latentq::kernels
