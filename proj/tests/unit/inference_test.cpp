#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "oracles.hpp"
#include "rstn/inference.hpp"
#include "rstn/synthgen.hpp"

using namespace rstn;

namespace {

std::array<model::ModelBundle, 3> tiny_bundles(std::uint64_t seed) {
  model::SaliencyConfig scfg;
  scfg.hidden = 4;
  std::array<model::ModelBundle, 3> out;
  for (int v = 0; v < 3; ++v) {
    out[static_cast<std::size_t>(v)] = model::init_bundle(
        kViewpoints[v], model::ArchDescriptor::tiny_backbone(), scfg, seed);
    CounterRng rng(derive_seed(seed, 400 + static_cast<std::uint64_t>(v)));
    auto& sal = out[static_cast<std::size_t>(v)].saliency;
    for (double& x : sal.kernels.back().data) x = 0.2 * rng.next_normal();
  }
  return out;
}

vol::Volume phantom_volume(std::uint64_t seed, vol::LabelMask* mask_out = nullptr) {
  synth::PhantomSpec spec;
  spec.extents = {32, 32, 32};
  spec.target_fraction_lo = 0.01;
  spec.target_fraction_hi = 0.03;
  spec.clutter_lo = 1;
  spec.clutter_hi = 2;
  spec.noise_sigma = 0.03;
  spec.seed = seed;
  auto [v, m] = synth::generate(spec);
  if (mask_out) *mask_out = std::move(m);
  return std::move(v);
}

}  // namespace

TEST_CASE("inference config validation") {
  infer::InferenceConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.threshold = 1.0;
  cfg.max_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("termination contract: threshold iff d >= thr, else max iterations") {
  const auto bundles = tiny_bundles(17);
  const vol::Volume x = phantom_volume(901);

  infer::InferenceConfig cfg;
  cfg.max_iterations = 3;
  cfg.threshold = 1.0;  // only bit-identical consecutive masks can stop early
  cfg.margin = 4;
  const auto res = infer::segment_volume(bundles, x, cfg, 2);
  REQUIRE(!res.trace.iterations.empty());
  const auto d = res.trace.d_sequence();
  if (res.trace.termination == infer::Termination::threshold) {
    CHECK(d.back() >= cfg.threshold);
  } else {
    CHECK(res.trace.iteration_count() == cfg.max_iterations);
    for (double v : d) CHECK(v < cfg.threshold);
  }

  // thr just above 0: the very first fine iteration terminates unless the
  // masks are fully disjoint.
  infer::InferenceConfig loose = cfg;
  loose.threshold = 1e-9;
  const auto res2 = infer::segment_volume(bundles, x, loose, 2);
  if (res2.trace.d_sequence()[0] >= loose.threshold)
    CHECK(res2.trace.termination == infer::Termination::threshold);
}

TEST_CASE("identical consecutive predictions terminate by threshold") {
  // Saturated coarse/fine outputs produce empty masks twice in a row, so
  // d^(1) = DSC(empty, empty) = 1 >= thr.
  auto bundles = tiny_bundles(18);
  for (auto& b : bundles) {
    b.coarse.biases.back().data[0] = -40.0;
    b.fine.biases.back().data[0] = -40.0;
  }
  const vol::Volume x = phantom_volume(902);
  infer::InferenceConfig cfg;
  cfg.max_iterations = 5;
  cfg.threshold = 0.99;
  const auto res = infer::segment_volume(bundles, x, cfg, 2);
  CHECK(res.trace.z0_empty);
  CHECK(res.trace.iteration_count() == 1);
  CHECK(res.trace.termination == infer::Termination::threshold);
  CHECK(res.trace.d_sequence()[0] == 1.0);
  CHECK(res.mask.foreground_count() == 0);
  // empty Z^(0) flows through whole-image fallbacks, flagged in the trace
  CHECK(res.trace.iterations[0].fallback_slices > 0);
}

TEST_CASE("inter_iteration_dsc equals volume dsc on random pairs") {
  CounterRng rng(7);
  const vol::Extents e{8, 8, 8};
  for (int trial = 0; trial < 100; ++trial) {
    vol::LabelMask a = vol::LabelMask::zeros(e), b = vol::LabelMask::zeros(e);
    for (auto& v : a.values) v = rng.next_unit() < 0.3 ? 1 : 0;
    for (auto& v : b.values) v = rng.next_unit() < 0.3 ? 1 : 0;
    CHECK(infer::inter_iteration_dsc(a, b) == vol::dsc(a, b));
  }
  vol::LabelMask a = vol::LabelMask::zeros(e);
  CHECK(infer::inter_iteration_dsc(a, a) == 1.0);
}

TEST_CASE("returned mask equals the trace's final prediction; runs are deterministic") {
  const auto bundles = tiny_bundles(21);
  const vol::Volume x = phantom_volume(903);
  infer::InferenceConfig cfg;
  cfg.max_iterations = 2;
  cfg.threshold = 0.95;
  cfg.margin = 4;

  const auto r1 = infer::segment_volume(bundles, x, cfg, 2);
  CHECK(r1.mask.values == r1.trace.final_mask.values);

  const auto r2 = infer::segment_volume(bundles, x, cfg, 1);
  CHECK(r1.mask.values == r2.mask.values);  // thread count cannot matter
  CHECK(r1.trace.d_sequence() == r2.trace.d_sequence());
  CHECK(r1.trace.z0.values == r2.trace.z0.values);
}

TEST_CASE("Z^(t) depends on P^(t-1) only through g and the crop box") {
  const auto bundles = tiny_bundles(23);
  const vol::Volume x = phantom_volume(904);
  infer::InferenceConfig cfg;
  cfg.max_iterations = 2;
  cfg.threshold = 1.0;
  cfg.margin = 4;
  cfg.record_view_maps = true;
  const auto res = infer::segment_volume(bundles, x, cfg, 2);
  REQUIRE(res.trace.view_maps.size() >= 2);

  // Recompute iteration 1 for each view from the stored P^(0) and compare
  // with the stored P^(1).
  for (int v = 0; v < 3; ++v) {
    const auto& prev = res.trace.view_maps[0][static_cast<std::size_t>(v)];
    int fallback = 0;
    const vol::ProbVolume redo = infer::fine_view_iteration(
        bundles[static_cast<std::size_t>(v)].fine,
        &bundles[static_cast<std::size_t>(v)].saliency, x, prev, nullptr,
        static_cast<vol::Axis>(v), cfg.margin, 1, &fallback);
    CHECK(redo.values == res.trace.view_maps[1][static_cast<std::size_t>(v)].values);
  }
}

TEST_CASE("iteration 0 runs the coarse networks only and never crops") {
  // A fine network biased to emit everything would dominate Z^(0) if it ran
  // at t=0; check Z^(0) matches a pure coarse fusion instead.
  auto bundles = tiny_bundles(29);
  for (auto& b : bundles) b.fine.biases.back().data[0] = 40.0;
  const vol::Volume x = phantom_volume(905);

  std::array<vol::ProbVolume, 3> views;
  for (int v = 0; v < 3; ++v) {
    const vol::Axis axis = static_cast<vol::Axis>(v);
    const int n = vol::axis_extent(x.extents, axis);
    std::vector<tc::Tensor> maps;
    for (int i = 0; i < n; ++i)
      maps.push_back(model::seg_forward(
          bundles[static_cast<std::size_t>(v)].coarse,
          vol::slice_stack(x, axis, i).image));
    views[static_cast<std::size_t>(v)] = vol::reassemble(maps, x.extents, axis);
  }
  const auto [fused, z0] = vol::fuse_and_binarize(views[0], views[1], views[2]);

  infer::InferenceConfig cfg;
  cfg.max_iterations = 1;
  const auto res = infer::segment_volume(bundles, x, cfg, 2);
  CHECK(res.trace.z0.values == z0.values);
}

TEST_CASE("oracle-box mode crops by the ground truth and flags the trace") {
  const auto bundles = tiny_bundles(31);
  vol::LabelMask y;
  const vol::Volume x = phantom_volume(906, &y);
  infer::InferenceConfig cfg;
  cfg.max_iterations = 2;
  cfg.threshold = 1.0;
  cfg.margin = 4;
  cfg.oracle_boxes = true;
  const auto res = infer::segment_with_oracle_boxes(bundles, x, y, cfg, 2);
  CHECK(res.trace.oracle_mode);

  // Slices with an empty ground-truth plane fall back to whole-image crops.
  int empty_slices = 0;
  for (int i = 0; i < y.extents.l; ++i) {
    if (vol::mask_slice(y, vol::Axis::axial, i).data ==
        tc::Tensor::zeros({1, y.extents.w, y.extents.h}).data)
      ++empty_slices;
  }
  CHECK(empty_slices > 0);
  CHECK(res.trace.iterations[0].fallback_slices > 0);
}

TEST_CASE("trace JSON carries the documented schema") {
  const auto bundles = tiny_bundles(37);
  const vol::Volume x = phantom_volume(907);
  infer::InferenceConfig cfg;
  cfg.max_iterations = 2;
  cfg.threshold = 1.0;
  const auto res = infer::segment_volume(bundles, x, cfg, 2);
  const auto dir = std::filesystem::temp_directory_path() / "rstn_infer_test";
  std::filesystem::create_directories(dir);
  CHECK_NOTHROW(infer::write_trace_json(res.trace, dir / "case.trace.json"));
  CHECK(std::filesystem::file_size(dir / "case.trace.json") > 0);
}
