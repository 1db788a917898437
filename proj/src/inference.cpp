#include "rstn/inference.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace rstn::infer {

using model::BackboneParams;
using model::ModelBundle;
using model::SaliencyParams;
using tc::Graph;
using tc::Tensor;

void InferenceConfig::validate() const {
  require(max_iterations >= 1, "max iterations must be >= 1");
  require(threshold > 0.0 && threshold <= 1.0, "threshold must lie in (0,1]");
  require(margin >= 0, "margin must be >= 0");
}

std::vector<double> IterationTrace::d_sequence() const {
  std::vector<double> d;
  d.reserve(iterations.size());
  for (const IterationRecord& r : iterations) d.push_back(r.inter_dsc);
  return d;
}

double inter_iteration_dsc(const vol::LabelMask& z_prev, const vol::LabelMask& z_cur) {
  return vol::dsc(z_prev, z_cur);
}

EngineParams engine_params(const std::array<ModelBundle, 3>& bundles,
                           bool with_saliency) {
  EngineParams p;
  for (int i = 0; i < 3; ++i) {
    const ModelBundle& m = bundles[static_cast<std::size_t>(i)];
    require(static_cast<int>(m.viewpoint) == i,
            "bundles must be ordered coronal, sagittal, axial");
    p.coarse[static_cast<std::size_t>(i)] = &m.coarse;
    p.fine[static_cast<std::size_t>(i)] = &m.fine;
    p.saliency[static_cast<std::size_t>(i)] = with_saliency ? &m.saliency : nullptr;
  }
  return p;
}

namespace {

vol::ProbVolume coarse_view_pass(const BackboneParams& coarse, const vol::Volume& x,
                                 vol::Axis axis, int threads) {
  const int n = vol::axis_extent(x.extents, axis);
  std::vector<Tensor> maps(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](int i) {
    const vol::SliceStack stack = vol::slice_stack(x, axis, i);
    maps[static_cast<std::size_t>(i)] = model::seg_forward(coarse, stack.image);
  });
  return vol::reassemble(maps, x.extents, axis);
}

}  // namespace

vol::ProbVolume fine_view_iteration(const BackboneParams& fine,
                                    const SaliencyParams* saliency,
                                    const vol::Volume& x, const vol::ProbVolume& prev,
                                    const vol::LabelMask* oracle, vol::Axis axis,
                                    int margin, int threads, int* fallback_slices) {
  const int n = vol::axis_extent(x.extents, axis);
  const auto [rows, cols] = vol::slice_dims(x.extents, axis);
  std::vector<Tensor> maps(static_cast<std::size_t>(n));
  std::vector<int> fallback(static_cast<std::size_t>(n), 0);

  parallel_for(n, threads, [&](int i) {
    const Tensor prev_slice = vol::slice_of(prev.values, x.extents, axis, i);
    const Tensor ref = oracle ? vol::mask_slice(*oracle, axis, i) : prev_slice;
    const train::CropBox box = train::crop_box(ref, margin);
    if (box.whole_image_fallback) fallback[static_cast<std::size_t>(i)] = 1;

    const vol::SliceStack stack = vol::slice_stack(x, axis, i);
    Graph g;
    const Graph::NodeId xid = g.leaf(stack.image, false);
    Graph::NodeId input = xid;
    if (saliency) {
      const auto sk = model::bind_params(g, saliency->kernels, false);
      const auto sb = model::bind_params(g, saliency->biases, false);
      const Graph::NodeId weights =
          model::build_saliency(g, g.leaf(prev_slice, false), sk, sb,
                                saliency->config);
      input = g.mul(xid, weights);
    }
    const Graph::NodeId cropped = g.window(input, box.win);
    const auto fk = model::bind_params(g, fine.kernels, false);
    const auto fb = model::bind_params(g, fine.biases, false);
    const Graph::NodeId p =
        model::build_backbone(g, cropped, fk, fb, fine.arch);

    // Probability outside the crop box is 0 for this iteration.
    Tensor full = Tensor::zeros({1, rows, cols});
    const Tensor& pv = g.value(p);
    for (int r = 0; r < box.win.rows(); ++r)
      for (int c = 0; c < box.win.cols(); ++c)
        full.at3(0, box.win.min_row + r, box.win.min_col + c) = pv.at3(0, r, c);
    maps[static_cast<std::size_t>(i)] = std::move(full);
  });

  if (fallback_slices) {
    int total = 0;
    for (int f : fallback) total += f;
    *fallback_slices = total;
  }
  return vol::reassemble(maps, x.extents, axis);
}

SegmentationResult run_engine(const EngineParams& params, const vol::Volume& x,
                              const vol::LabelMask* oracle, const InferenceConfig& cfg,
                              int threads) {
  cfg.validate();
  x.validate();
  for (int v = 0; v < 3; ++v)
    require(params.coarse[static_cast<std::size_t>(v)] && params.fine[static_cast<std::size_t>(v)],
            "engine needs coarse and fine networks for all three viewpoints");
  if (oracle)
    require(oracle->extents == x.extents, "oracle mask extent mismatch");

  IterationTrace trace;
  trace.oracle_mode = oracle != nullptr;

  // Iteration 0: coarse networks over full slices, per view, then fusion.
  std::array<vol::ProbVolume, 3> view_probs;
  for (int v = 0; v < 3; ++v) {
    view_probs[static_cast<std::size_t>(v)] = coarse_view_pass(
        *params.coarse[static_cast<std::size_t>(v)], x, static_cast<vol::Axis>(v), threads);
  }
  auto [fused, z] = vol::fuse_and_binarize(view_probs[0], view_probs[1], view_probs[2]);
  trace.z0 = z;
  trace.z0_empty = z.foreground_count() == 0;
  if (cfg.record_view_maps) trace.view_maps.push_back(view_probs);

  vol::LabelMask z_prev = std::move(z);
  for (int t = 1; t <= cfg.max_iterations; ++t) {
    IterationRecord rec;
    for (int v = 0; v < 3; ++v) {
      int fb = 0;
      view_probs[static_cast<std::size_t>(v)] = fine_view_iteration(
          *params.fine[static_cast<std::size_t>(v)], params.saliency[static_cast<std::size_t>(v)],
          x, view_probs[static_cast<std::size_t>(v)], oracle, static_cast<vol::Axis>(v),
          cfg.margin, threads, &fb);
      rec.fallback_slices += fb;
    }
    auto [fused_t, z_t] =
        vol::fuse_and_binarize(view_probs[0], view_probs[1], view_probs[2]);
    rec.inter_dsc = inter_iteration_dsc(z_prev, z_t);
    rec.voxels = z_t.foreground_count();
    trace.iterations.push_back(rec);
    if (cfg.record_view_maps) trace.view_maps.push_back(view_probs);
    z_prev = std::move(z_t);
    if (rec.inter_dsc >= cfg.threshold) {
      trace.termination = Termination::threshold;
      break;
    }
    trace.termination = Termination::max_iterations;
  }

  trace.final_mask = z_prev;
  return SegmentationResult{std::move(z_prev), std::move(trace)};
}

SegmentationResult segment_volume(const std::array<ModelBundle, 3>& bundles,
                                  const vol::Volume& x, const InferenceConfig& cfg,
                                  int threads) {
  require(!cfg.oracle_boxes,
          "segment_volume: use segment_with_oracle_boxes for oracle mode");
  return run_engine(engine_params(bundles, true), x, nullptr, cfg, threads);
}

SegmentationResult segment_with_oracle_boxes(
    const std::array<ModelBundle, 3>& bundles, const vol::Volume& x,
    const vol::LabelMask& y, const InferenceConfig& cfg, int threads) {
  return run_engine(engine_params(bundles, true), x, &y, cfg, threads);
}

void write_trace_json(const IterationTrace& trace,
                      const std::filesystem::path& path) {
  nlohmann::json j;
  j["iterations"] = trace.iteration_count();
  j["d-sequence"] = trace.d_sequence();
  j["termination"] = trace.termination == Termination::threshold
                         ? "threshold"
                         : "max-iterations";
  j["oracle-mode"] = trace.oracle_mode;
  j["z0-voxels"] = trace.z0.foreground_count();
  j["z0-empty"] = trace.z0_empty;
  nlohmann::json voxels = nlohmann::json::array();
  nlohmann::json fallbacks = nlohmann::json::array();
  for (const IterationRecord& r : trace.iterations) {
    voxels.push_back(r.voxels);
    fallbacks.push_back(r.fallback_slices);
  }
  j["voxels-per-iteration"] = voxels;
  j["fallback-slices-per-iteration"] = fallbacks;
  std::ofstream os(path);
  require(os.good(), "cannot write trace " + path.string());
  os << j.dump(2) << "\n";
}

}  // namespace rstn::infer
