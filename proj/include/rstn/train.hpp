#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rstn/model.hpp"
#include "rstn/rng.hpp"
#include "rstn/tensor.hpp"
#include "rstn/volume.hpp"

namespace rstn::train {

// Minimal rectangle covering the activated (>= 0.5) pixels of a reference
// map, expanded by a K-pixel margin and clamped to the image bounds. An
// empty reference falls back to the whole image.
struct CropBox {
  tc::Window win;
  int margin = 0;
  bool whole_image_fallback = false;
};

CropBox crop_box(const tc::Tensor& reference, int margin);
std::pair<tc::Tensor, CropBox> crop(const tc::Tensor& image,
                                    const tc::Tensor& reference, int margin);

// 1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps), eps = 1e-6.
inline constexpr double kSoftDscEps = 1e-6;
double soft_dsc_loss(const tc::Tensor& y, const tc::Tensor& p);
tc::Graph::NodeId soft_dsc_loss_node(tc::Graph& g, tc::Graph::NodeId p,
                                     const tc::Tensor& y);

// lambda_0 = 1/(2T+1), lambda_t = 2/(2T+1) for t >= 1; sums to 1.
std::vector<double> loss_weights(int t_max);

struct TrainConfig {
  int unroll_iterations = 1;  // T, capped at 5
  int phase1_steps = 3000;    // ground-truth reference maps
  int phase2_steps = 1500;    // predicted reference maps
  double lr1 = 0.03;
  double lr2 = 0.003;  // must be < lr1
  double momentum = 0.9;
  int margin = 20;  // K

  void validate() const;
  int total_steps() const { return phase1_steps + phase2_steps; }
};

struct NetConfig {
  model::ArchDescriptor backbone = model::ArchDescriptor::default_backbone();
  model::SaliencyConfig saliency;
};

struct UnrollState {
  std::vector<tc::Tensor> inputs;      // I^(t) fed to the fine net, t >= 1
  std::vector<tc::Tensor> prob_maps;   // P^(t), t >= 0 (crop-local for t >= 1)
  std::vector<tc::Tensor> binarized;   // Z^(t) = I[P^(t) >= 0.5]
  std::vector<CropBox> boxes;          // t >= 1
  std::vector<double> term_losses;     // L_t
  std::vector<double> weighted_terms;  // lambda_t * L_t
  double total_loss = 0.0;
};

struct StepResult {
  UnrollState state;
  // Aligned with model::named_params(bundle) order.
  std::vector<tc::Tensor> gradients;
};

// One unrolled forward/backward pass over a slice stack. Phase 1 crops by
// the ground truth, phase 2 by the running prediction; gradients cover
// coarse, fine and saliency parameters jointly.
StepResult unrolled_step(const model::ModelBundle& bundle, const tc::Tensor& stack,
                         const tc::Tensor& y, const TrainConfig& cfg, int phase,
                         bool record_state = false);

// Forward-only total loss (used by the finite-difference gradient check).
double unrolled_loss(const model::ModelBundle& bundle, const tc::Tensor& stack,
                     const tc::Tensor& y, const TrainConfig& cfg, int phase);

struct TrainLogRecord {
  int step = 0;
  int phase = 1;
  Viewpoint viewpoint = Viewpoint::axial;
  std::vector<double> weighted_terms;
  double total = 0.0;
};

struct TrainingSet {
  std::vector<const vol::Volume*> volumes;
  std::vector<const vol::LabelMask*> masks;

  std::size_t size() const { return volumes.size(); }
};

struct TrainedModel {
  std::array<model::ModelBundle, 3> bundles;  // indexed by Viewpoint
  std::vector<TrainLogRecord> log;            // merged, ordered by (step, view)
};

// Jointly trains the three per-viewpoint bundles. Training samples are
// drawn from slices whose ground-truth plane is nonempty; the DSC loss
// carries no signal on empty slices.
model::ModelBundle train_viewpoint(const TrainingSet& data, Viewpoint vp,
                                   const TrainConfig& cfg, const NetConfig& net,
                                   std::uint64_t seed,
                                   std::vector<TrainLogRecord>* log);

TrainedModel train(const TrainingSet& data, const TrainConfig& cfg,
                   const NetConfig& net, std::uint64_t seed, int threads);

// Deterministic (case, slice) sampling stream for one viewpoint.
class SliceSampler {
 public:
  SliceSampler(const TrainingSet& data, vol::Axis axis, std::uint64_t seed);
  std::pair<int, int> next();  // (case index, slice index)
  bool empty() const { return total_positive_ == 0; }

 private:
  std::vector<std::vector<int>> positive_;
  std::size_t total_positive_ = 0;
  CounterRng rng_;
};

void append_log_jsonl(const std::vector<TrainLogRecord>& log,
                      const std::filesystem::path& path);

}  // namespace rstn::train
