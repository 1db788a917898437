#include <atomic>
#include <cstdlib>
#include <string>

#include "rstn/common.hpp"
#include "rstn/kernels.hpp"

namespace rstn::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

bool compiled_with_avx2() {
#if defined(__AVX2__) || defined(__x86_64__)
  // avx2.cpp is built whenever the target is x86-64 (see CMakeLists).
  return true;
#else
  return false;
#endif
}

Backend initial_backend() {
  if (const char* env = std::getenv("RSTN_BACKEND")) {
    const Backend b = backend_from_name(env);
    if (b == Backend::avx2)
      require(avx2_available(), "RSTN_BACKEND=avx2 but this CPU lacks avx2");
    return b;
  }
  return avx2_available() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{initial_backend()};
  return slot;
}

}  // namespace

bool avx2_available() {
  static const bool ok = compiled_with_avx2() && cpu_has_avx2();
  return ok;
}

Backend active_backend() {
  return backend_slot().load(std::memory_order_relaxed);
}

void force_backend(Backend b) {
  if (b == Backend::avx2) require(avx2_available(), "avx2 backend unavailable on this CPU");
  backend_slot().store(b, std::memory_order_relaxed);
}

void select_backend_auto() {
  backend_slot().store(avx2_available() ? Backend::avx2 : Backend::scalar,
                       std::memory_order_relaxed);
}

Backend backend_from_name(const std::string& name) {
  if (name == "scalar") return Backend::scalar;
  if (name == "avx2" || name == "simd") return Backend::avx2;
  if (name == "auto")
    return avx2_available() ? Backend::avx2 : Backend::scalar;
  throw Error("unknown kernel backend '" + name + "' (scalar|avx2|auto)");
}

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

const Ops& ops() {
  return active_backend() == Backend::avx2 ? avx2_ops() : scalar_ops();
}

}  // namespace rstn::kernels
