#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "rstn/model.hpp"
#include "rstn/train.hpp"

using namespace rstn;
namespace fs = std::filesystem;
using tc::Tensor;

namespace {

Tensor random_image(int c, int h, int w, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor t = Tensor::zeros({c, h, w});
  for (double& v : t.data) v = rng.next_unit();
  return t;
}

}  // namespace

TEST_CASE("seg_forward: shape, range and determinism") {
  const auto arch = model::ArchDescriptor::default_backbone();
  const auto params = model::init_backbone(arch, 5);
  const Tensor img = random_image(3, 32, 32, 6);
  const Tensor p1 = model::seg_forward(params, img);
  CHECK(p1.shape == std::vector<int>{1, 32, 32});
  for (double v : p1.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const Tensor p2 = model::seg_forward(params, img);
  CHECK(std::memcmp(p1.data.data(), p2.data.data(), p1.data.size() * 8) == 0);
}

TEST_CASE("seg_forward preserves spatial extent on odd sizes") {
  const auto arch = model::ArchDescriptor::default_backbone();
  const auto params = model::init_backbone(arch, 5);
  for (const auto [h, w] : {std::pair{9, 13}, {21, 21}, {5, 24}}) {
    const Tensor p = model::seg_forward(params, random_image(3, h, w, 17));
    CHECK(p.shape == std::vector<int>{1, h, w});
  }
}

TEST_CASE("freshly initialized network is not saturated") {
  const auto arch = model::ArchDescriptor::default_backbone();
  const auto params = model::init_backbone(arch, 9);
  const Tensor p = model::seg_forward(params, random_image(3, 32, 32, 10));
  double mean = 0.0;
  for (double v : p.data) mean += v;
  mean /= static_cast<double>(p.data.size());
  CHECK(mean > 0.2);
  CHECK(mean < 0.8);
}

TEST_CASE("architecture minimum extent is enforced") {
  auto arch = model::ArchDescriptor::default_backbone();
  arch.min_input = 8;
  const auto params = model::init_backbone(arch, 5);
  CHECK_THROWS_AS(model::seg_forward(params, random_image(3, 6, 6, 3)), Error);
  CHECK_NOTHROW(model::seg_forward(params, random_image(3, 8, 8, 3)));
}

TEST_CASE("saliency with zero parameters weights everything by exactly 1") {
  for (int layers : {1, 2}) {
    model::SaliencyConfig cfg;
    cfg.layers = layers;
    auto params = model::init_saliency(cfg, 3);
    model::zero_saliency(params);
    const Tensor p = random_image(1, 12, 12, 4);
    const Tensor w = model::saliency_forward(params, p);
    CHECK(w.shape == std::vector<int>{3, 12, 12});
    for (double v : w.data) CHECK(v == 1.0);
  }
}

TEST_CASE("X (.) g(P) with identity weighting reproduces X bit-exactly") {
  model::SaliencyConfig cfg;
  auto params = model::init_saliency(cfg, 3);
  model::zero_saliency(params);
  const Tensor x = random_image(3, 10, 10, 5);
  const Tensor w = model::saliency_forward(params, random_image(1, 10, 10, 6));
  tc::Graph g;
  const auto prod = g.mul(g.leaf(x), g.leaf(w));
  CHECK(std::memcmp(g.value(prod).data.data(), x.data.data(),
                    x.data.size() * 8) == 0);
}

TEST_CASE("saliency kernel-size and layer variants keep the output contract") {
  for (int ksz : {1, 3, 5}) {
    for (int layers : {1, 2}) {
      model::SaliencyConfig cfg;
      cfg.kernel = ksz;
      cfg.layers = layers;
      auto params = model::init_saliency(cfg, 11);
      // exercise a non-identity point
      for (auto& t : params.kernels)
        for (double& v : t.data) v += 0.05;
      const Tensor w = model::saliency_forward(params, random_image(1, 9, 9, 12));
      CHECK(w.shape == std::vector<int>{3, 9, 9});
      for (double v : w.data) {
        CHECK(v > 0.0);
        CHECK(v < 2.0);
      }
    }
  }
  model::SaliencyConfig bad;
  bad.kernel = 7;
  CHECK_THROWS_AS(model::init_saliency(bad, 1), Error);
}

TEST_CASE("saliency gradients match finite differences") {
  model::SaliencyConfig cfg;
  cfg.hidden = 4;
  model::SaliencyParams params = model::init_saliency(cfg, 21);
  CounterRng rng(22);
  for (double& v : params.kernels.back().data) v = 0.4 * rng.next_normal();
  for (double& v : params.biases.back().data) v = 0.1 * rng.next_normal();
  const Tensor p = random_image(1, 9, 9, 23);

  auto build = [&](tc::Graph& g, bool with_grad,
                   std::vector<tc::Graph::NodeId>* kids,
                   std::vector<tc::Graph::NodeId>* bids) {
    *kids = model::bind_params(g, params.kernels, with_grad);
    *bids = model::bind_params(g, params.biases, with_grad);
    const auto w = model::build_saliency(g, g.leaf(p, false), *kids, *bids,
                                         params.config);
    // scalar probe: sum(w * w)
    return g.sum(g.mul(w, w));
  };

  tc::Graph g;
  std::vector<tc::Graph::NodeId> kids, bids;
  const auto loss = build(g, true, &kids, &bids);
  g.backward(loss);
  std::vector<Tensor> analytic;
  std::vector<Tensor*> ptrs;
  for (std::size_t i = 0; i < kids.size(); ++i) {
    analytic.push_back(g.grad(kids[i]));
    analytic.push_back(g.grad(bids[i]));
    ptrs.push_back(&params.kernels[i]);
    ptrs.push_back(&params.biases[i]);
  }
  auto loss_fn = [&]() {
    tc::Graph gg;
    std::vector<tc::Graph::NodeId> a, b;
    return gg.value(build(gg, false, &a, &b)).data[0];
  };
  const auto res = tc::check_gradients(loss_fn, ptrs, analytic, 1e-5);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("initialization is deterministic and He-scaled") {
  const auto arch = model::ArchDescriptor::default_backbone();
  const auto p1 = model::init_backbone(arch, 77);
  const auto p2 = model::init_backbone(arch, 77);
  for (std::size_t i = 0; i < p1.kernels.size(); ++i)
    CHECK(p1.kernels[i].data == p2.kernels[i].data);
  const auto p3 = model::init_backbone(arch, 78);
  CHECK(p1.kernels[0].data != p3.kernels[0].data);

  // variance ~ 2/fan_in on a large layer (32*3*3 fan-in, 32*32*9 samples)
  const Tensor& big = p1.kernels[3];
  const double fan_in = 32.0 * 9.0;
  double var = 0.0;
  for (double v : big.data) var += v * v;
  var /= static_cast<double>(big.data.size());
  CHECK(var > 0.8 * 2.0 / fan_in);
  CHECK(var < 1.2 * 2.0 / fan_in);

  for (const Tensor& b : p1.biases)
    for (double v : b.data) CHECK(v == 0.0);
}

TEST_CASE("bundle save/load round-trips bit-exactly") {
  model::SaliencyConfig scfg;
  model::ModelBundle m = model::init_bundle(
      Viewpoint::sagittal, model::ArchDescriptor::default_backbone(), scfg, 123);
  const auto dir = fs::temp_directory_path() / "rstn_model_test";
  fs::create_directories(dir);
  const auto base = dir / "bundle_a";
  model::save_bundle(m, base, "rstn");

  std::string kind;
  model::ModelBundle l = model::load_bundle(base, &kind);
  CHECK(kind == "rstn");
  CHECK(l.viewpoint == Viewpoint::sagittal);
  auto pm = model::named_params(m);
  auto pl = model::named_params(l);
  REQUIRE(pm.size() == pl.size());
  for (std::size_t i = 0; i < pm.size(); ++i) {
    CHECK(pm[i].name == pl[i].name);
    CHECK(pm[i].tensor->shape == pl[i].tensor->shape);
    CHECK(std::memcmp(pm[i].tensor->data.data(), pl[i].tensor->data.data(),
                      pm[i].tensor->data.size() * 8) == 0);
  }
}

TEST_CASE("corrupt or mismatched weight files are rejected") {
  model::SaliencyConfig scfg;
  model::ModelBundle m = model::init_bundle(
      Viewpoint::axial, model::ArchDescriptor::tiny_backbone(), scfg, 5);
  const auto dir = fs::temp_directory_path() / "rstn_model_test";
  fs::create_directories(dir);
  const auto base = dir / "bundle_bad";
  model::save_bundle(m, base, "rstn");

  fs::resize_file(fs::path(base.string() + ".bin"), 64);
  CHECK_THROWS_AS(model::load_bundle(base), Error);

  std::ofstream os(base.string() + ".json");
  os << "{\"format\":\"RSTN-W\",\"version\":2}";
  os.close();
  CHECK_THROWS_AS(model::load_bundle(base), Error);

  CHECK_THROWS_AS(model::load_bundle(dir / "missing"), Error);
}
