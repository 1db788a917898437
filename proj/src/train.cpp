#include "rstn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace rstn::train {

using model::ModelBundle;
using tc::Graph;
using tc::Tensor;

CropBox crop_box(const tc::Tensor& reference, int margin) {
  require(reference.rank() == 3 && reference.dim(0) == 1,
          "crop reference must be [1,H,W]");
  require(margin >= 0, "crop margin must be >= 0");
  const int h = reference.dim(1), w = reference.dim(2);
  int r0 = h, c0 = w, r1 = -1, c1 = -1;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (reference.at3(0, r, c) >= 0.5) {
        r0 = std::min(r0, r);
        c0 = std::min(c0, c);
        r1 = std::max(r1, r);
        c1 = std::max(c1, c);
      }
    }
  }
  CropBox box;
  box.margin = margin;
  if (r1 < 0) {  // nothing activated: fall back to the whole image
    box.win = tc::Window{0, 0, h - 1, w - 1};
    box.whole_image_fallback = true;
    return box;
  }
  box.win = tc::Window{std::max(0, r0 - margin), std::max(0, c0 - margin),
                       std::min(h - 1, r1 + margin), std::min(w - 1, c1 + margin)};
  return box;
}

std::pair<tc::Tensor, CropBox> crop(const tc::Tensor& image,
                                    const tc::Tensor& reference, int margin) {
  require(image.rank() == 3, "crop image must be [C,H,W]");
  require(image.dim(1) == reference.dim(1) && image.dim(2) == reference.dim(2),
          "crop: image/reference extent mismatch");
  const CropBox box = crop_box(reference, margin);
  Tensor out = Tensor::zeros({image.dim(0), box.win.rows(), box.win.cols()});
  for (int c = 0; c < image.dim(0); ++c)
    for (int r = 0; r < box.win.rows(); ++r)
      for (int cc = 0; cc < box.win.cols(); ++cc)
        out.at3(c, r, cc) = image.at3(c, box.win.min_row + r, box.win.min_col + cc);
  return {std::move(out), box};
}

namespace {

void check_binary(const Tensor& y) {
  for (double v : y.data)
    require(v == 0.0 || v == 1.0, "ground-truth map must be binary");
}

double sum_of(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data) acc += v;
  return acc;
}

Tensor window_values(const Tensor& t, const tc::Window& win) {
  Tensor out = Tensor::zeros({t.dim(0), win.rows(), win.cols()});
  for (int c = 0; c < t.dim(0); ++c)
    for (int r = 0; r < win.rows(); ++r)
      for (int cc = 0; cc < win.cols(); ++cc)
        out.at3(c, r, cc) = t.at3(c, win.min_row + r, win.min_col + cc);
  return out;
}

Tensor binarize_map(const Tensor& p) {
  Tensor z = Tensor::zeros(p.shape);
  for (std::size_t i = 0; i < p.data.size(); ++i)
    z.data[i] = p.data[i] >= 0.5 ? 1.0 : 0.0;
  return z;
}

}  // namespace

double soft_dsc_loss(const tc::Tensor& y, const tc::Tensor& p) {
  require(y.same_shape(p), "soft_dsc_loss shape mismatch: " + tc::shape_str(y.shape) +
                               " vs " + tc::shape_str(p.shape));
  check_binary(y);
  double inter = 0.0, sp = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) {
    inter += y.data[i] * p.data[i];
    sy += y.data[i];
    sp += p.data[i];
  }
  return 1.0 - (2.0 * inter + kSoftDscEps) / (sy + sp + kSoftDscEps);
}

Graph::NodeId soft_dsc_loss_node(Graph& g, Graph::NodeId p, const tc::Tensor& y) {
  require(y.same_shape(g.value(p)), "soft_dsc_loss shape mismatch: " +
                                        tc::shape_str(y.shape) + " vs " +
                                        tc::shape_str(g.value(p).shape));
  check_binary(y);
  const double sum_y = sum_of(y);
  const Graph::NodeId yleaf = g.leaf(y, false);
  const Graph::NodeId inter = g.sum(g.mul(yleaf, p));
  const Graph::NodeId num = g.affine(inter, 2.0, kSoftDscEps);
  const Graph::NodeId den = g.affine(g.sum(p), 1.0, sum_y + kSoftDscEps);
  return g.affine(g.div(num, den), -1.0, 1.0);
}

std::vector<double> loss_weights(int t_max) {
  require(t_max >= 1, "loss_weights: T must be >= 1");
  const double unit = 2.0 / (2.0 * t_max + 1.0);
  std::vector<double> w(static_cast<std::size_t>(t_max) + 1, unit);
  w[0] = unit / 2.0;
  return w;
}

void TrainConfig::validate() const {
  require(unroll_iterations >= 1 && unroll_iterations <= 5,
          "unroll iterations must lie in [1,5]");
  require(phase1_steps >= 0 && phase2_steps >= 0, "step counts must be >= 0");
  require(lr1 > 0.0 && lr2 > 0.0, "learning rates must be positive");
  require(lr2 < lr1, "phase-2 learning rate must be below phase-1");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  require(margin >= 0, "margin must be >= 0");
}

namespace {

struct BoundBundle {
  std::vector<Graph::NodeId> coarse_k, coarse_b;
  std::vector<Graph::NodeId> fine_k, fine_b;
  std::vector<Graph::NodeId> sal_k, sal_b;
};

BoundBundle bind_bundle(Graph& g, const ModelBundle& m, bool with_grad) {
  BoundBundle b;
  b.coarse_k = model::bind_params(g, m.coarse.kernels, with_grad);
  b.coarse_b = model::bind_params(g, m.coarse.biases, with_grad);
  b.fine_k = model::bind_params(g, m.fine.kernels, with_grad);
  b.fine_b = model::bind_params(g, m.fine.biases, with_grad);
  b.sal_k = model::bind_params(g, m.saliency.kernels, with_grad);
  b.sal_b = model::bind_params(g, m.saliency.biases, with_grad);
  return b;
}

// Parameter node ids in named_params() order.
std::vector<Graph::NodeId> param_ids(const BoundBundle& b) {
  std::vector<Graph::NodeId> ids;
  auto interleave = [&ids](const std::vector<Graph::NodeId>& k,
                           const std::vector<Graph::NodeId>& bias) {
    for (std::size_t i = 0; i < k.size(); ++i) {
      ids.push_back(k[i]);
      ids.push_back(bias[i]);
    }
  };
  interleave(b.coarse_k, b.coarse_b);
  interleave(b.fine_k, b.fine_b);
  interleave(b.sal_k, b.sal_b);
  return ids;
}

struct UnrolledGraph {
  Graph::NodeId total = -1;
  UnrollState state;
};

UnrolledGraph build_unrolled(Graph& g, const BoundBundle& bb,
                             const ModelBundle& bundle, const tc::Tensor& stack,
                             const tc::Tensor& y, const TrainConfig& cfg,
                             int phase, bool record_state) {
  require(phase == 1 || phase == 2, "phase must be 1 or 2");
  require(stack.rank() == 3 && stack.dim(0) == 3, "stack must be [3,H,W]");
  require(y.rank() == 3 && y.dim(0) == 1 && y.dim(1) == stack.dim(1) &&
              y.dim(2) == stack.dim(2),
          "ground truth must be [1,H,W] matching the stack");

  const int T = cfg.unroll_iterations;
  const int H = stack.dim(1), W = stack.dim(2);
  const std::vector<double> lambda = loss_weights(T);

  UnrolledGraph out;
  const Graph::NodeId x = g.leaf(stack, false);

  // t = 0: coarse network on the full slice, I^(0) = X.
  const Graph::NodeId p0 =
      model::build_backbone(g, x, bb.coarse_k, bb.coarse_b, bundle.coarse.arch);
  std::vector<Graph::NodeId> losses;
  losses.push_back(soft_dsc_loss_node(g, p0, y));

  Graph::NodeId prev_full = p0;  // P^(t-1) embedded on the full grid
  for (int t = 1; t <= T; ++t) {
    // Reference map for the crop: ground truth in phase 1, the running
    // prediction in phase 2. Box coordinates are data, not graph nodes.
    const CropBox box =
        crop_box(phase == 1 ? y : g.value(prev_full), cfg.margin);

    // I^(t) = X (.) g(P^(t-1)) on the full grid, then cropped.
    const Graph::NodeId weights =
        model::build_saliency(g, prev_full, bb.sal_k, bb.sal_b,
                              bundle.saliency.config);
    const Graph::NodeId weighted = g.mul(x, weights);
    const Graph::NodeId cropped = g.window(weighted, box.win);
    const Graph::NodeId pt =
        model::build_backbone(g, cropped, bb.fine_k, bb.fine_b, bundle.fine.arch);

    // Loss term t pairs P^(t) with the ground truth restricted to the box.
    const Tensor y_t = window_values(y, box.win);
    losses.push_back(soft_dsc_loss_node(g, pt, y_t));

    out.state.boxes.push_back(box);
    if (record_state) {
      out.state.inputs.push_back(g.value(cropped));
      out.state.prob_maps.push_back(g.value(pt));
    }
    if (t < T) prev_full = g.embed(pt, box.win, H, W);
  }

  Graph::NodeId total = g.affine(losses[0], lambda[0], 0.0);
  out.state.term_losses.push_back(g.value(losses[0]).data[0]);
  out.state.weighted_terms.push_back(lambda[0] * out.state.term_losses[0]);
  for (int t = 1; t <= T; ++t) {
    const double lt = g.value(losses[static_cast<std::size_t>(t)]).data[0];
    out.state.term_losses.push_back(lt);
    out.state.weighted_terms.push_back(lambda[static_cast<std::size_t>(t)] * lt);
    total = g.add(total, g.affine(losses[static_cast<std::size_t>(t)],
                                  lambda[static_cast<std::size_t>(t)], 0.0));
  }
  out.total = total;
  out.state.total_loss = g.value(total).data[0];

  if (record_state) {
    out.state.prob_maps.insert(out.state.prob_maps.begin(), g.value(p0));
    for (const Tensor& p : out.state.prob_maps)
      out.state.binarized.push_back(binarize_map(p));
  }
  return out;
}

}  // namespace

StepResult unrolled_step(const ModelBundle& bundle, const tc::Tensor& stack,
                         const tc::Tensor& y, const TrainConfig& cfg, int phase,
                         bool record_state) {
  cfg.validate();
  Graph g;
  const BoundBundle bb = bind_bundle(g, bundle, true);
  UnrolledGraph ug = build_unrolled(g, bb, bundle, stack, y, cfg, phase, record_state);
  require(std::isfinite(ug.state.total_loss),
          "unrolled step produced a non-finite loss");
  g.backward(ug.total);

  StepResult res;
  res.state = std::move(ug.state);
  for (Graph::NodeId id : param_ids(bb)) res.gradients.push_back(g.grad(id));
  return res;
}

double unrolled_loss(const ModelBundle& bundle, const tc::Tensor& stack,
                     const tc::Tensor& y, const TrainConfig& cfg, int phase) {
  Graph g;
  const BoundBundle bb = bind_bundle(g, bundle, false);
  return build_unrolled(g, bb, bundle, stack, y, cfg, phase, false)
      .state.total_loss;
}

SliceSampler::SliceSampler(const TrainingSet& data, vol::Axis axis,
                           std::uint64_t seed)
    : rng_(seed) {
  positive_.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const vol::LabelMask& m = *data.masks[i];
    const int n = vol::axis_extent(m.extents, axis);
    for (int s = 0; s < n; ++s) {
      const Tensor ys = vol::mask_slice(m, axis, s);
      for (double v : ys.data) {
        if (v != 0.0) {
          positive_[i].push_back(s);
          break;
        }
      }
    }
    total_positive_ += positive_[i].size();
  }
}

std::pair<int, int> SliceSampler::next() {
  require(total_positive_ > 0, "training set has no foreground slices");
  for (;;) {
    const int ci = static_cast<int>(rng_.next_below(positive_.size()));
    const auto& slices = positive_[static_cast<std::size_t>(ci)];
    if (slices.empty()) continue;
    const int si = slices[rng_.next_below(slices.size())];
    return {ci, si};
  }
}

namespace {
constexpr std::uint64_t kTagSample = 0x73616d706c65ull;
constexpr std::uint64_t kTagModel = 0x6d6f64656cull;
}  // namespace

model::ModelBundle train_viewpoint(const TrainingSet& data, Viewpoint vp,
                                   const TrainConfig& cfg, const NetConfig& net,
                                   std::uint64_t seed,
                                   std::vector<TrainLogRecord>* log) {
  cfg.validate();
  require(data.size() >= 1, "training set is empty");
  const vol::Axis axis = vol::axis_of(vp);
  const std::uint64_t vtag = static_cast<std::uint64_t>(vp);

  ModelBundle bundle = model::init_bundle(
      vp, net.backbone, net.saliency, derive_seed(seed, kTagModel + vtag));
  SliceSampler sampler(data, axis, derive_seed(seed, kTagSample + vtag));

  auto params = model::named_params(bundle);
  std::vector<Tensor*> param_ptrs;
  for (auto& p : params) param_ptrs.push_back(p.tensor);

  tc::OptimizerState opt;
  opt.momentum = cfg.momentum;

  for (int step = 0; step < cfg.total_steps(); ++step) {
    const int phase = step < cfg.phase1_steps ? 1 : 2;
    opt.learning_rate = phase == 1 ? cfg.lr1 : cfg.lr2;

    const auto [ci, si] = sampler.next();
    const vol::SliceStack stack = vol::slice_stack(*data.volumes[static_cast<std::size_t>(ci)], axis, si);
    const Tensor y = vol::mask_slice(*data.masks[static_cast<std::size_t>(ci)], axis, si);

    StepResult res;
    try {
      res = unrolled_step(bundle, stack.image, y, cfg, phase);
    } catch (const Error& e) {
      throw Error(std::string("training aborted at step ") + std::to_string(step) +
                  " (" + viewpoint_name(vp) + "): " + e.what());
    }

    std::vector<const Tensor*> grad_ptrs;
    grad_ptrs.reserve(res.gradients.size());
    for (const Tensor& gt : res.gradients) grad_ptrs.push_back(&gt);
    tc::sgd_step(param_ptrs, grad_ptrs, opt);

    if (log) {
      log->push_back(TrainLogRecord{step, phase, vp, res.state.weighted_terms,
                                    res.state.total_loss});
    }
  }
  return bundle;
}

TrainedModel train(const TrainingSet& data, const TrainConfig& cfg,
                   const NetConfig& net, std::uint64_t seed, int threads) {
  TrainedModel out;
  std::array<std::vector<TrainLogRecord>, 3> logs;
  parallel_for(3, threads, [&](int i) {
    const Viewpoint vp = kViewpoints[i];
    out.bundles[static_cast<std::size_t>(i)] =
        train_viewpoint(data, vp, cfg, net, seed, &logs[static_cast<std::size_t>(i)]);
  });
  // Deterministic merge: by step, then viewpoint order.
  for (int step = 0; step < cfg.total_steps(); ++step)
    for (int v = 0; v < 3; ++v)
      out.log.push_back(logs[static_cast<std::size_t>(v)][static_cast<std::size_t>(step)]);
  return out;
}

void append_log_jsonl(const std::vector<TrainLogRecord>& log,
                      const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::app);
  require(os.good(), "cannot write training log " + path.string());
  for (const TrainLogRecord& r : log) {
    nlohmann::json j;
    j["step"] = r.step;
    j["phase"] = r.phase;
    j["viewpoint"] = viewpoint_name(r.viewpoint);
    j["terms"] = r.weighted_terms;
    j["total"] = r.total;
    os << j.dump() << "\n";
  }
}

}  // namespace rstn::train
