// AVX2 variants of the dense kernels. Compiled with -mavx2 on x86-64 and
// entered only after the runtime CPU check in dispatch.cpp. Per-output
// operation order matches the scalar reference (see kernels.hpp), except
// conv2d_grad_kernel which accumulates four partial lanes.

#include "rstn/common.hpp"
#include "rstn/kernels.hpp"

#if defined(__AVX2__)

#include <immintrin.h>

#include <cstddef>
#include <vector>

namespace rstn::kernels {
namespace {

thread_local std::vector<double> tl_pad;

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

void conv2d_forward_avx2(const Conv2dShape& s, const double* x,
                         const double* w, const double* b, double* y) {
  const int p = (s.k - 1) / 2;
  int pw = 0;
  const double* xp = padded(x, s.cin, s.h, s.w, p, &pw);
  const int ph = s.h + 2 * p;
  const std::size_t plane_stride = static_cast<std::size_t>(ph) * pw;
  for (int co = 0; co < s.cout; ++co) {
    const double* wb = w + static_cast<std::size_t>(co) * s.cin * s.k * s.k;
    double* yrow = y + static_cast<std::size_t>(co) * s.h * s.w;
    for (int yy = 0; yy < s.h; ++yy) {
      double* out = yrow + static_cast<std::size_t>(yy) * s.w;
      const double* base = xp + static_cast<std::size_t>(yy) * pw;
      int xx = 0;
      for (; xx + 8 <= s.w; xx += 8) {
        __m256d acc0 = _mm256_set1_pd(b[co]);
        __m256d acc1 = acc0;
        const double* wk = wb;
        for (int ci = 0; ci < s.cin; ++ci) {
          const double* plane = base + ci * plane_stride + xx;
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) {
              const __m256d wv = _mm256_broadcast_sd(wk + v);
              acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(row + v), wv));
              acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(_mm256_loadu_pd(row + v + 4), wv));
            }
            wk += s.k;
          }
        }
        _mm256_storeu_pd(out + xx, acc0);
        _mm256_storeu_pd(out + xx + 4, acc1);
      }
      for (; xx + 4 <= s.w; xx += 4) {
        __m256d acc = _mm256_set1_pd(b[co]);
        const double* wk = wb;
        for (int ci = 0; ci < s.cin; ++ci) {
          const double* plane = base + ci * plane_stride + xx;
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) {
              acc = _mm256_add_pd(
                  acc, _mm256_mul_pd(_mm256_loadu_pd(row + v), _mm256_broadcast_sd(wk + v)));
            }
            wk += s.k;
          }
        }
        _mm256_storeu_pd(out + xx, acc);
      }
      for (; xx < s.w; ++xx) {
        double acc = b[co];
        const double* wk = wb;
        for (int ci = 0; ci < s.cin; ++ci) {
          const double* plane = base + ci * plane_stride + xx;
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) acc += row[v] * wk[v];
            wk += s.k;
          }
        }
        out[xx] = acc;
      }
    }
  }
}

void conv2d_grad_input_avx2(const Conv2dShape& s, const double* dy,
                            const double* w, double* dx) {
  const int p = (s.k - 1) / 2;
  int pw = 0;
  const double* gp = padded(dy, s.cout, s.h, s.w, p, &pw);
  const int ph = s.h + 2 * p;
  const std::size_t plane_stride = static_cast<std::size_t>(ph) * pw;
  const int ksq = s.k * s.k;
  for (int ci = 0; ci < s.cin; ++ci) {
    double* drow = dx + static_cast<std::size_t>(ci) * s.h * s.w;
    for (int yy = 0; yy < s.h; ++yy) {
      double* out = drow + static_cast<std::size_t>(yy) * s.w;
      const double* base = gp + static_cast<std::size_t>(yy) * pw;
      int xx = 0;
      for (; xx + 4 <= s.w; xx += 4) {
        __m256d acc = _mm256_setzero_pd();
        for (int co = 0; co < s.cout; ++co) {
          const double* plane = base + co * plane_stride + xx;
          const double* wk =
              w + (static_cast<std::size_t>(co) * s.cin + ci) * ksq + (ksq - 1);
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) {
              acc = _mm256_add_pd(
                  acc, _mm256_mul_pd(_mm256_loadu_pd(row + v),
                                     _mm256_broadcast_sd(wk - (u * s.k + v))));
            }
          }
        }
        __m256d prev = _mm256_loadu_pd(out + xx);
        _mm256_storeu_pd(out + xx, _mm256_add_pd(prev, acc));
      }
      for (; xx < s.w; ++xx) {
        double acc = 0.0;
        for (int co = 0; co < s.cout; ++co) {
          const double* plane = base + co * plane_stride + xx;
          const double* wk =
              w + (static_cast<std::size_t>(co) * s.cin + ci) * ksq + (ksq - 1);
          for (int u = 0; u < s.k; ++u) {
            const double* row = plane + static_cast<std::size_t>(u) * pw;
            for (int v = 0; v < s.k; ++v) acc += row[v] * wk[-(u * s.k + v)];
          }
        }
        out[xx] += acc;
      }
    }
  }
}

void conv2d_grad_kernel_avx2(const Conv2dShape& s, const double* dy,
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
          __m256d acc4 = _mm256_setzero_pd();
          double tail = 0.0;
          for (int yy = 0; yy < s.h; ++yy) {
            const double* row =
                xp + (static_cast<std::size_t>(ci) * ph + yy + u) * pw + v;
            const double* grow = g + static_cast<std::size_t>(yy) * s.w;
            int xx = 0;
            for (; xx + 4 <= s.w; xx += 4) {
              acc4 = _mm256_add_pd(
                  acc4, _mm256_mul_pd(_mm256_loadu_pd(grow + xx),
                                      _mm256_loadu_pd(row + xx)));
            }
            for (; xx < s.w; ++xx) tail += grow[xx] * row[xx];
          }
          // lanes summed pairwise; reassociation covered by tolerance test
          const __m128d lo = _mm256_castpd256_pd128(acc4);
          const __m128d hi = _mm256_extractf128_pd(acc4, 1);
          const __m128d pair = _mm_add_pd(lo, hi);
          const __m128d hsum = _mm_add_sd(pair, _mm_unpackhi_pd(pair, pair));
          wk[u * s.k + v] += _mm_cvtsd_f64(hsum) + tail;
        }
      }
    }
  }
}

void mul_avx2(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void add_avx2(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void relu_avx2(const double* x, double* y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void mul_acc_avx2(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += a[i] * b[i];
}

void relu_grad_acc_avx2(const double* dy, const double* x, double* dx,
                        std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d gated = _mm256_and_pd(_mm256_loadu_pd(dy + i), mask);
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), gated));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

void sigmoid_grad_acc_avx2(const double* dy, const double* s, double* dx,
                           std::size_t n) {
  const __m256d one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d sv = _mm256_loadu_pd(s + i);
    const __m256d d = _mm256_mul_pd(_mm256_loadu_pd(dy + i),
                                    _mm256_mul_pd(sv, _mm256_sub_pd(one, sv)));
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), d));
  }
  for (; i < n; ++i) dx[i] += dy[i] * (s[i] * (1.0 - s[i]));
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), t));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void sgd_update_avx2(double lr, double momentum, double* p, double* v,
                     const double* g, std::size_t n) {
  const __m256d mom = _mm256_set1_pd(momentum);
  const __m256d lrv = _mm256_set1_pd(lr);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d nv = _mm256_sub_pd(_mm256_mul_pd(mom, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(lrv, _mm256_loadu_pd(g + i)));
    _mm256_storeu_pd(v + i, nv);
    _mm256_storeu_pd(p + i, _mm256_add_pd(_mm256_loadu_pd(p + i), nv));
  }
  for (; i < n; ++i) {
    v[i] = momentum * v[i] - lr * g[i];
    p[i] += v[i];
  }
}

}  // namespace

const Ops& avx2_ops() {
  static const Ops table = {
      conv2d_forward_avx2,  conv2d_grad_input_avx2,
      conv2d_grad_kernel_avx2, mul_avx2,
      add_avx2,             relu_avx2,
      mul_acc_avx2,         relu_grad_acc_avx2,
      sigmoid_grad_acc_avx2, axpy_avx2,
      sgd_update_avx2,
  };
  return table;
}

}  // namespace rstn::kernels

#else  // !__AVX2__

namespace rstn::kernels {
const Ops& avx2_ops() {
  throw rstn::Error("avx2 kernels are not compiled into this binary");
}
}  // namespace rstn::kernels

#endif
