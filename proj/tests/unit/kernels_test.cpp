#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "rstn/common.hpp"
#include "rstn/kernels.hpp"

using namespace rstn;
namespace k = rstn::kernels;

namespace {

struct KernelCase {
  k::Conv2dShape shape;
  std::vector<double> x, w, b;
};

KernelCase make_case(int cin, int cout, int h, int w, int ksz, std::uint64_t seed) {
  CounterRng rng(seed);
  KernelCase c;
  c.shape = {cin, cout, h, w, ksz};
  c.x = oracle::random_vec(static_cast<std::size_t>(cin) * h * w, rng);
  c.w = oracle::random_vec(static_cast<std::size_t>(cout) * cin * ksz * ksz, rng);
  c.b = oracle::random_vec(static_cast<std::size_t>(cout), rng);
  return c;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

const std::vector<std::array<int, 5>> kShapes = {
    {1, 1, 5, 5, 3},  {3, 4, 9, 9, 3},   {2, 3, 7, 11, 5}, {4, 2, 6, 6, 1},
    {3, 16, 16, 16, 3}, {16, 1, 12, 13, 3}, {1, 3, 1, 1, 3},  {2, 2, 3, 17, 3},
};

}  // namespace

TEST_CASE("scalar conv2d forward matches the bounds-checked oracle") {
  int idx = 0;
  for (const auto& s : kShapes) {
    const KernelCase c = make_case(s[0], s[1], s[2], s[3], s[4], 100 + idx++);
    std::vector<double> y(static_cast<std::size_t>(s[1]) * s[2] * s[3], 0.0);
    k::scalar_ops().conv2d_forward(c.shape, c.x.data(), c.w.data(), c.b.data(),
                                   y.data());
    const auto ref = oracle::conv2d_forward({s[0], s[1], s[2], s[3], s[4]}, c.x,
                                            c.w, c.b);
    for (std::size_t i = 0; i < y.size(); ++i)
      CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  }
}

TEST_CASE("scalar conv2d adjoints match the oracle adjoints") {
  for (const auto& s : kShapes) {
    const KernelCase c = make_case(s[0], s[1], s[2], s[3], s[4], 7);
    CounterRng rng(991);
    const auto dy =
        oracle::random_vec(static_cast<std::size_t>(s[1]) * s[2] * s[3], rng);

    std::vector<double> dx(static_cast<std::size_t>(s[0]) * s[2] * s[3], 0.0);
    k::scalar_ops().conv2d_grad_input(c.shape, dy.data(), c.w.data(), dx.data());
    const auto dx_ref =
        oracle::conv2d_grad_input({s[0], s[1], s[2], s[3], s[4]}, dy, c.w);
    for (std::size_t i = 0; i < dx.size(); ++i)
      CHECK(dx[i] == doctest::Approx(dx_ref[i]).epsilon(1e-12));

    std::vector<double> dw(c.w.size(), 0.0);
    k::scalar_ops().conv2d_grad_kernel(c.shape, dy.data(), c.x.data(), dw.data());
    const auto dw_ref =
        oracle::conv2d_grad_kernel({s[0], s[1], s[2], s[3], s[4]}, dy, c.x);
    for (std::size_t i = 0; i < dw.size(); ++i)
      CHECK(dw[i] == doctest::Approx(dw_ref[i]).epsilon(1e-12));

    std::vector<double> db(static_cast<std::size_t>(s[1]), 0.0);
    k::conv2d_grad_bias(c.shape, dy.data(), db.data());
    for (int co = 0; co < s[1]; ++co) {
      double acc = 0.0;
      for (int i = 0; i < s[2] * s[3]; ++i)
        acc += dy[static_cast<std::size_t>(co) * s[2] * s[3] + i];
      CHECK(db[static_cast<std::size_t>(co)] == doctest::Approx(acc));
    }
  }
}

TEST_CASE("avx2 conv2d forward and grad_input are bit-identical to scalar") {
  if (!k::avx2_available()) {
    MESSAGE("avx2 unavailable; skipping");
    return;
  }
  int idx = 0;
  for (const auto& s : kShapes) {
    const KernelCase c = make_case(s[0], s[1], s[2], s[3], s[4], 300 + idx++);
    const std::size_t ny = static_cast<std::size_t>(s[1]) * s[2] * s[3];
    std::vector<double> y_s(ny, 0.0), y_v(ny, 0.0);
    k::scalar_ops().conv2d_forward(c.shape, c.x.data(), c.w.data(), c.b.data(),
                                   y_s.data());
    k::avx2_ops().conv2d_forward(c.shape, c.x.data(), c.w.data(), c.b.data(),
                                 y_v.data());
    CHECK(bit_equal(y_s, y_v));

    CounterRng rng(55);
    const auto dy = oracle::random_vec(ny, rng);
    const std::size_t nx = static_cast<std::size_t>(s[0]) * s[2] * s[3];
    std::vector<double> dx_s(nx, 0.25), dx_v(nx, 0.25);  // accumulate semantics
    k::scalar_ops().conv2d_grad_input(c.shape, dy.data(), c.w.data(), dx_s.data());
    k::avx2_ops().conv2d_grad_input(c.shape, dy.data(), c.w.data(), dx_v.data());
    CHECK(bit_equal(dx_s, dx_v));
  }
}

TEST_CASE("avx2 conv2d grad_kernel matches scalar within 1e-12 relative") {
  if (!k::avx2_available()) {
    MESSAGE("avx2 unavailable; skipping");
    return;
  }
  for (const auto& s : kShapes) {
    const KernelCase c = make_case(s[0], s[1], s[2], s[3], s[4], 17);
    CounterRng rng(56);
    const auto dy =
        oracle::random_vec(static_cast<std::size_t>(s[1]) * s[2] * s[3], rng);
    std::vector<double> dw_s(c.w.size(), 0.0), dw_v(c.w.size(), 0.0);
    k::scalar_ops().conv2d_grad_kernel(c.shape, dy.data(), c.x.data(), dw_s.data());
    k::avx2_ops().conv2d_grad_kernel(c.shape, dy.data(), c.x.data(), dw_v.data());
    for (std::size_t i = 0; i < dw_s.size(); ++i) {
      const double denom = std::max(1e-30, std::abs(dw_s[i]));
      CHECK(std::abs(dw_s[i] - dw_v[i]) / denom <= 1e-12);
    }
  }
}

TEST_CASE("elementwise and optimizer kernels are bit-identical across backends") {
  if (!k::avx2_available()) {
    MESSAGE("avx2 unavailable; skipping");
    return;
  }
  CounterRng rng(4711);
  const std::size_t n = 1037;  // odd size exercises the vector tail
  const auto a = oracle::random_vec(n, rng);
  const auto b = oracle::random_vec(n, rng);

  auto run_both = [&](auto&& invoke) {
    std::vector<double> out_s(n, 0.5), out_v(n, 0.5);
    invoke(k::scalar_ops(), out_s);
    invoke(k::avx2_ops(), out_v);
    CHECK(bit_equal(out_s, out_v));
  };

  run_both([&](const k::Ops& o, std::vector<double>& y) {
    o.mul(a.data(), b.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& y) {
    o.add(a.data(), b.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& y) {
    o.relu(a.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& y) {
    o.mul_acc(a.data(), b.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& y) {
    o.relu_grad_acc(a.data(), b.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& y) {
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = 0.5 + 0.4 * a[i];
    o.sigmoid_grad_acc(b.data(), s.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& y) {
    o.axpy(0.37, a.data(), y.data(), n);
  });
  run_both([&](const k::Ops& o, std::vector<double>& p) {
    std::vector<double> v(n, 0.125);
    o.sgd_update(0.01, 0.9, p.data(), v.data(), a.data(), n);
  });
}

TEST_CASE("backend dispatch honors overrides") {
  const k::Backend prior = k::active_backend();
  k::force_backend(k::Backend::scalar);
  CHECK(k::active_backend() == k::Backend::scalar);
  k::select_backend_auto();
  if (k::avx2_available())
    CHECK(k::active_backend() == k::Backend::avx2);
  else
    CHECK(k::active_backend() == k::Backend::scalar);
  CHECK_THROWS_AS(k::backend_from_name("quantum"), rstn::Error);
  k::force_backend(prior);
}
