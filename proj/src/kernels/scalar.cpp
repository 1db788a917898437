#include <cstddef>
#include <vector>

#include "rstn/kernels.hpp"

namespace rstn::kernels {
namespace {

// Grow-only zero-padded image scratch, one per thread.
thread_local std::vector<double> tl_pad;

// Copies x (c planes of h*w) into a buffer with a p-wide zero border per
// plane. Padding keeps the inner loops branch-free; adding w*0 terms does
// not change the accumulator, so results equal bounds-checked summation.
const double* padded(const double* x, int c, int h, int w, int p, int* pw_out) {
  const int ph = h + 2 * p;
  const int pw = w + 2 * p;
  tl_pad.assign(static_cast<std::size_t>(c) * ph * pw, 0.0);
  for (int ci = 0; ci < c; ++ci) {
    const double* src = x + static_cast<std::size_t>(ci) * h * w;
    double* dst = tl_pad.data() + static_cast<std::size_t>(ci) * ph * pw;
    for (int y = 0; y < h; ++y) {
      double* row = dst + static_cast<std::size_t>(y + p) * pw + p;
      const double* srow = src + static_cast<std::size_t>(y) * w;
      for (int xx = 0; xx < w; ++xx) row[xx] = srow[xx];
    }
  }
  *pw_out = pw;
  return tl_pad.data();
}

void conv2d_forward_scalar(const Conv2dShape& s, const double* x,
                           const double* w, const double* b, double* y) {
  const int p = (s.k - 1) / 2;
  int pw = 0;
  const double* xp = padded(x, s.cin, s.h, s.w, p, &pw);
  const int ph = s.h + 2 * p;
  for (int co = 0; co < s.cout; ++co) {
    const double* wb = w + static_cast<std::size_t>(co) * s.cin * s.k * s.k;
    double* yrow = y + static_cast<std::size_t>(co) * s.h * s.w;
    for (int yy = 0; yy < s.h; ++yy) {
      for (int xx = 0; xx < s.w; ++xx) {
        double acc = b[co];
        const double* wk = wb;
        for (int ci = 0; ci < s.cin; ++ci) {
          const double* plane = xp + (static_cast<std::size_t>(ci) * ph + yy) * pw + xx;
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) acc += row[v] * wk[v];
            wk += s.k;
          }
        }
        yrow[static_cast<std::size_t>(yy) * s.w + xx] = acc;
      }
    }
  }
}

void conv2d_grad_input_scalar(const Conv2dShape& s, const double* dy,
                              const double* w, double* dx) {
  // dx[ci,y,x] += sum_{co,u,v} dyPad[co,y+u,x+v] * w[co,ci,k-1-u,k-1-v]
  const int p = (s.k - 1) / 2;
  int pw = 0;
  const double* gp = padded(dy, s.cout, s.h, s.w, p, &pw);
  const int ph = s.h + 2 * p;
  for (int ci = 0; ci < s.cin; ++ci) {
    double* drow = dx + static_cast<std::size_t>(ci) * s.h * s.w;
    for (int yy = 0; yy < s.h; ++yy) {
      for (int xx = 0; xx < s.w; ++xx) {
        double acc = 0.0;
        for (int co = 0; co < s.cout; ++co) {
          const double* plane = gp + (static_cast<std::size_t>(co) * ph + yy) * pw + xx;
          const double* wk =
              w + ((static_cast<std::size_t>(co) * s.cin + ci) + 1) * s.k * s.k - 1;
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) acc += row[v] * wk[-(u * s.k + v)];
          }
        }
        drow[static_cast<std::size_t>(yy) * s.w + xx] += acc;
      }
    }
  }
}

void conv2d_grad_kernel_scalar(const Conv2dShape& s, const double* dy,
                               const double* x, double* dw) {
  const int p = (s.k - 1) / 2;
  int pw = 0;
  const double* xp = padded(x, s.cin, s.h, s.w, p, &pw);
  const int ph = s.h + 2 * p;
  for (int co = 0; co < s.cout; ++co) {
    const double* g = dy + static_cast<std::size_t>(co) * s.h * s.w;
    for (int ci = 0; ci < s.cin; ++ci) {
      double* wk = dw + (static_cast<std::size_t>(co) * s.cin + ci) * s.k * s.k;
      for (int u = 0; u < s.k; ++u) {
        for (int v = 0; v < s.k; ++v) {
          double acc = 0.0;
          for (int yy = 0; yy < s.h; ++yy) {
            const double* row = xp + (static_cast<std::size_t>(ci) * ph + yy + u) * pw + v;
            const double* grow = g + static_cast<std::size_t>(yy) * s.w;
            for (int xx = 0; xx < s.w; ++xx) acc += grow[xx] * row[xx];
          }
          wk[u * s.k + v] += acc;
        }
      }
    }
  }
}

void mul_scalar(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void add_scalar(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void relu_scalar(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void mul_acc_scalar(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

void relu_grad_acc_scalar(const double* dy, const double* x, double* dx,
                          std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

void sigmoid_grad_acc_scalar(const double* dy, const double* s, double* dx,
                             std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * (s[i] * (1.0 - s[i]));
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void sgd_update_scalar(double lr, double momentum, double* p, double* v,
                       const double* g, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = momentum * v[i] - lr * g[i];
    p[i] += v[i];
  }
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops table = {
      conv2d_forward_scalar,  conv2d_grad_input_scalar,
      conv2d_grad_kernel_scalar, mul_scalar,
      add_scalar,             relu_scalar,
      mul_acc_scalar,         relu_grad_acc_scalar,
      sigmoid_grad_acc_scalar, axpy_scalar,
      sgd_update_scalar,
  };
  return table;
}

void conv2d_grad_bias(const Conv2dShape& s, const double* dy, double* db) {
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  for (int co = 0; co < s.cout; ++co) {
    double acc = 0.0;
    const double* g = dy + co * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += g[i];
    db[co] += acc;
  }
}

}  // namespace rstn::kernels
