#pragma once

#include <cstddef>
#include <string>

namespace rstn::kernels {

// Dense f64 kernels behind the tensor ops. Every kernel exists as a scalar
// reference and (on x86-64) an AVX2 variant selected once at startup.
//
// Equivalence contract, enforced by tests/unit/kernels_equivalence:
//   - conv2d_forward, conv2d_grad_input and all elementwise kernels are
//     bit-identical between backends (per-output-element operation order is
//     the same; fp contraction is disabled project-wide),
//   - conv2d_grad_kernel reduces over the image with four partial lanes in
//     the AVX2 variant, so it is tied to the scalar reference by a 1e-12
//     relative tolerance instead of bit equality.
// Reductions that feed user-visible values (sum, bias gradient) stay scalar
// with fixed row-major ascending order.

enum class Backend { scalar, avx2 };

struct Conv2dShape {
  int cin = 0;
  int cout = 0;
  int h = 0;
  int w = 0;
  int k = 0;  // odd; same padding of (k-1)/2
};

struct Ops {
  // y[co,y,x] = b[co] + sum_{ci,u,v} x[ci,y+u-p,x+v-p] * w[co,ci,u,v]
  void (*conv2d_forward)(const Conv2dShape&, const double* x, const double* w,
                         const double* b, double* y);
  // dx[ci,...] += adjoint of conv2d_forward wrt x
  void (*conv2d_grad_input)(const Conv2dShape&, const double* dy,
                            const double* w, double* dx);
  // dw[co,ci,u,v] += adjoint wrt w
  void (*conv2d_grad_kernel)(const Conv2dShape&, const double* dy,
                             const double* x, double* dw);
  void (*mul)(const double* a, const double* b, double* y, std::size_t n);
  void (*add)(const double* a, const double* b, double* y, std::size_t n);
  void (*relu)(const double* x, double* y, std::size_t n);
  // y[i] += a[i] * b[i]
  void (*mul_acc)(const double* a, const double* b, double* y, std::size_t n);
  // dx[i] += dy[i] * (x[i] > 0)
  void (*relu_grad_acc)(const double* dy, const double* x, double* dx,
                        std::size_t n);
  // dx[i] += dy[i] * s[i] * (1 - s[i]), s = stored sigmoid output
  void (*sigmoid_grad_acc)(const double* dy, const double* s, double* dx,
                           std::size_t n);
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // v = momentum*v - lr*g ; p += v
  void (*sgd_update)(double lr, double momentum, double* p, double* v,
                     const double* g, std::size_t n);
};

// Scalar reference table (always available) and the active dispatch table.
const Ops& scalar_ops();
const Ops& avx2_ops();  // throws rstn::Error if unsupported on this CPU
const Ops& ops();

bool avx2_available();
Backend active_backend();
// Startup default is avx2 when the CPU supports it, else scalar. The
// RSTN_BACKEND environment variable ("scalar"/"avx2"/"auto") or the CLI
// --backend flag override it.
void force_backend(Backend b);
void select_backend_auto();
Backend backend_from_name(const std::string& name);  // also accepts "auto"
const char* backend_name(Backend b);

// dbias[co] += sum_{y,x} dy[co,y,x]; fixed-order scalar reduction.
void conv2d_grad_bias(const Conv2dShape& s, const double* dy, double* db);

}  // namespace rstn::kernels
