#include "rstn/baseline.hpp"

#include <cmath>

namespace rstn::baseline {

using model::ModelBundle;
using tc::Graph;
using tc::Tensor;

namespace {

constexpr std::uint64_t kTagCoarseSample = 0x62636f61727365ull;
constexpr std::uint64_t kTagFineSample = 0x6266696e65ull;
constexpr std::uint64_t kTagCoarseModel = 0x62636d6f64ull;
constexpr std::uint64_t kTagFineModel = 0x62666d6f64ull;

struct SingleNetStep {
  double loss = 0.0;
  std::vector<Tensor> gradients;
};

// Plain soft-DSC step for one backbone; `gt_crop` trains on the
// ground-truth box region, otherwise on the full slice.
SingleNetStep backbone_step(const model::BackboneParams& net, const Tensor& stack,
                            const Tensor& y, int margin, bool gt_crop) {
  Graph g;
  const auto kids = model::bind_params(g, net.kernels, true);
  const auto bids = model::bind_params(g, net.biases, true);
  Graph::NodeId x = g.leaf(stack, false);
  Tensor y_used = y;
  if (gt_crop) {
    const train::CropBox box = train::crop_box(y, margin);
    x = g.window(x, box.win);
    Tensor yc = Tensor::zeros({1, box.win.rows(), box.win.cols()});
    for (int r = 0; r < box.win.rows(); ++r)
      for (int c = 0; c < box.win.cols(); ++c)
        yc.at3(0, r, c) = y.at3(0, box.win.min_row + r, box.win.min_col + c);
    y_used = std::move(yc);
  }
  const Graph::NodeId p = model::build_backbone(g, x, kids, bids, net.arch);
  const Graph::NodeId loss = train::soft_dsc_loss_node(g, p, y_used);

  SingleNetStep out;
  out.loss = g.value(loss).data[0];
  require(std::isfinite(out.loss), "stagewise step produced a non-finite loss");
  g.backward(loss);
  for (std::size_t i = 0; i < kids.size(); ++i) {
    out.gradients.push_back(g.grad(kids[i]));
    out.gradients.push_back(g.grad(bids[i]));
  }
  return out;
}

model::BackboneParams train_single_net(const train::TrainingSet& data,
                                       Viewpoint vp, const train::TrainConfig& cfg,
                                       const model::ArchDescriptor& arch,
                                       std::uint64_t model_seed,
                                       std::uint64_t sample_seed, bool gt_crop,
                                       const char* net_tag,
                                       std::vector<train::TrainLogRecord>* log) {
  const vol::Axis axis = vol::axis_of(vp);
  model::BackboneParams net = model::init_backbone(arch, model_seed);
  train::SliceSampler sampler(data, axis, sample_seed);

  std::vector<Tensor*> params;
  for (std::size_t i = 0; i < net.kernels.size(); ++i) {
    params.push_back(&net.kernels[i]);
    params.push_back(&net.biases[i]);
  }
  tc::OptimizerState opt;
  opt.momentum = cfg.momentum;

  for (int step = 0; step < cfg.total_steps(); ++step) {
    const int phase = step < cfg.phase1_steps ? 1 : 2;
    opt.learning_rate = phase == 1 ? cfg.lr1 : cfg.lr2;
    const auto [ci, si] = sampler.next();
    const vol::SliceStack stack =
        vol::slice_stack(*data.volumes[static_cast<std::size_t>(ci)], axis, si);
    const Tensor y = vol::mask_slice(*data.masks[static_cast<std::size_t>(ci)], axis, si);

    SingleNetStep res;
    try {
      res = backbone_step(net, stack.image, y, cfg.margin, gt_crop);
    } catch (const Error& e) {
      throw Error(std::string("stagewise ") + net_tag + " training aborted at step " +
                  std::to_string(step) + " (" + viewpoint_name(vp) + "): " + e.what());
    }
    std::vector<const Tensor*> grads;
    for (const Tensor& t : res.gradients) grads.push_back(&t);
    tc::sgd_step(params, grads, opt);
    if (log)
      log->push_back(train::TrainLogRecord{step, phase, vp, {res.loss}, res.loss});
  }
  return net;
}

}  // namespace

StagewiseBundle stagewise_train_viewpoint(const train::TrainingSet& data,
                                          Viewpoint vp, const train::TrainConfig& cfg,
                                          const train::NetConfig& net,
                                          std::uint64_t seed,
                                          std::vector<train::TrainLogRecord>* log) {
  cfg.validate();
  const std::uint64_t vtag = static_cast<std::uint64_t>(vp);
  StagewiseBundle b;
  b.viewpoint = vp;
  b.coarse = train_single_net(data, vp, cfg, net.backbone,
                              derive_seed(seed, kTagCoarseModel + vtag),
                              derive_seed(seed, kTagCoarseSample + vtag),
                              /*gt_crop=*/false, "coarse", log);
  b.fine = train_single_net(data, vp, cfg, net.backbone,
                            derive_seed(seed, kTagFineModel + vtag),
                            derive_seed(seed, kTagFineSample + vtag),
                            /*gt_crop=*/true, "fine", log);
  return b;
}

StagewiseModel stagewise_train(const train::TrainingSet& data,
                               const train::TrainConfig& cfg,
                               const train::NetConfig& net, std::uint64_t seed,
                               int threads) {
  StagewiseModel out;
  std::array<std::vector<train::TrainLogRecord>, 3> logs;
  parallel_for(3, threads, [&](int i) {
    out.bundles[static_cast<std::size_t>(i)] = stagewise_train_viewpoint(
        data, kViewpoints[i], cfg, net, seed, &logs[static_cast<std::size_t>(i)]);
  });
  for (auto& l : logs)
    out.log.insert(out.log.end(), l.begin(), l.end());
  return out;
}

infer::EngineParams stagewise_engine_params(const std::array<StagewiseBundle, 3>& b) {
  infer::EngineParams p;
  for (int i = 0; i < 3; ++i) {
    require(static_cast<int>(b[static_cast<std::size_t>(i)].viewpoint) == i,
            "bundles must be ordered coronal, sagittal, axial");
    p.coarse[static_cast<std::size_t>(i)] = &b[static_cast<std::size_t>(i)].coarse;
    p.fine[static_cast<std::size_t>(i)] = &b[static_cast<std::size_t>(i)].fine;
    p.saliency[static_cast<std::size_t>(i)] = nullptr;
  }
  return p;
}

infer::SegmentationResult stagewise_infer(const std::array<StagewiseBundle, 3>& bundles,
                                          const vol::Volume& x,
                                          const infer::InferenceConfig& cfg,
                                          int threads) {
  return infer::run_engine(stagewise_engine_params(bundles), x, nullptr, cfg, threads);
}

void save_stagewise(const StagewiseBundle& b, const std::filesystem::path& path_base,
                    const model::SaliencyConfig& scfg) {
  ModelBundle m;
  m.viewpoint = b.viewpoint;
  m.coarse = b.coarse;
  m.fine = b.fine;
  m.saliency = model::init_saliency(scfg, 0);
  model::zero_saliency(m.saliency);
  model::save_bundle(m, path_base, "stagewise");
}

StagewiseBundle load_stagewise(const std::filesystem::path& path_base) {
  std::string kind;
  ModelBundle m = model::load_bundle(path_base, &kind);
  require(kind == "stagewise",
          "expected a stagewise weight file at " + path_base.string());
  StagewiseBundle b;
  b.viewpoint = m.viewpoint;
  b.coarse = std::move(m.coarse);
  b.fine = std::move(m.fine);
  return b;
}

const char* source_name(Source s) {
  return s == Source::joint ? "joint" : "stagewise";
}

std::vector<MixEntry> mix_and_match(const std::array<ModelBundle, 3>& joint,
                                    const std::array<StagewiseBundle, 3>& stagewise,
                                    const std::vector<MixCase>& cases,
                                    const infer::InferenceConfig& cfg, int threads) {
  require(!cases.empty(), "mix_and_match: no evaluation cases");
  std::vector<MixEntry> out;
  for (const Source cs : {Source::stagewise, Source::joint}) {
    for (const Source fs : {Source::stagewise, Source::joint}) {
      infer::EngineParams p;
      for (int v = 0; v < 3; ++v) {
        const std::size_t vi = static_cast<std::size_t>(v);
        p.coarse[vi] = cs == Source::joint ? &joint[vi].coarse : &stagewise[vi].coarse;
        p.fine[vi] = fs == Source::joint ? &joint[vi].fine : &stagewise[vi].fine;
        p.saliency[vi] = fs == Source::joint ? &joint[vi].saliency : nullptr;
      }
      MixEntry entry;
      entry.coarse_from = cs;
      entry.fine_from = fs;
      entry.per_case.resize(cases.size());
      parallel_for(static_cast<int>(cases.size()), threads, [&](int i) {
        const MixCase& mc = cases[static_cast<std::size_t>(i)];
        const auto res = infer::run_engine(p, *mc.volume, nullptr, cfg, 1);
        entry.per_case[static_cast<std::size_t>(i)] = vol::dsc(res.mask, *mc.mask);
      });
      double mean = 0.0;
      for (double d : entry.per_case) mean += d;
      mean /= static_cast<double>(entry.per_case.size());
      double var = 0.0;
      for (double d : entry.per_case) var += (d - mean) * (d - mean);
      entry.mean = mean;
      entry.stddev = std::sqrt(var / static_cast<double>(entry.per_case.size()));
      out.push_back(std::move(entry));
    }
  }
  return out;
}

}  // namespace rstn::baseline
