#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

#include "rstn/model.hpp"
#include "rstn/train.hpp"
#include "rstn/volume.hpp"

namespace rstn::infer {

struct InferenceConfig {
  int max_iterations = 10;  // T
  double threshold = 0.99;  // thr
  int margin = 20;          // K
  bool oracle_boxes = false;
  bool record_view_maps = false;  // keep per-view P volumes in the trace

  void validate() const;
};

enum class Termination { threshold, max_iterations };

struct IterationRecord {
  double inter_dsc = 0.0;  // d^(t) = DSC{Z^(t-1), Z^(t)}
  std::size_t voxels = 0;  // |Z^(t)|
  int fallback_slices = 0; // slices that fell back to a whole-image crop
};

// Counted iterations are the fine iterations t >= 1; the coarse pass is
// recorded separately as Z^(0).
struct IterationTrace {
  vol::LabelMask z0;
  bool z0_empty = false;
  std::vector<IterationRecord> iterations;
  Termination termination = Termination::max_iterations;
  bool oracle_mode = false;
  vol::LabelMask final_mask;
  std::vector<std::array<vol::ProbVolume, 3>> view_maps;  // when recorded

  int iteration_count() const { return static_cast<int>(iterations.size()); }
  std::vector<double> d_sequence() const;
};

struct SegmentationResult {
  vol::LabelMask mask;
  IterationTrace trace;
};

// Per-view network selection; saliency == nullptr runs the stage-wise
// mechanics (bounding box only, no weighting).
struct EngineParams {
  std::array<const model::BackboneParams*, 3> coarse{};
  std::array<const model::BackboneParams*, 3> fine{};
  std::array<const model::SaliencyParams*, 3> saliency{};
};

EngineParams engine_params(const std::array<model::ModelBundle, 3>& bundles,
                           bool with_saliency = true);

// Algorithm core: iteration 0 fuses the three coarse networks over full
// slices; each later iteration crops per view by its own previous map (or
// the oracle mask), applies the optional saliency weighting, runs the fine
// network and fuses. Terminates when DSC{Z^(t-1),Z^(t)} >= thr or t == T.
SegmentationResult run_engine(const EngineParams& params, const vol::Volume& x,
                              const vol::LabelMask* oracle, const InferenceConfig& cfg,
                              int threads = 1);

SegmentationResult segment_volume(const std::array<model::ModelBundle, 3>& bundles,
                                  const vol::Volume& x, const InferenceConfig& cfg,
                                  int threads = 1);

SegmentationResult segment_with_oracle_boxes(
    const std::array<model::ModelBundle, 3>& bundles, const vol::Volume& x,
    const vol::LabelMask& y, const InferenceConfig& cfg, int threads = 1);

double inter_iteration_dsc(const vol::LabelMask& z_prev, const vol::LabelMask& z_cur);

// One fine iteration for a single view; exposed so the dependence of Z^(t)
// on P^(t-1) (through g and the crop box only) can be tested directly.
vol::ProbVolume fine_view_iteration(const model::BackboneParams& fine,
                                    const model::SaliencyParams* saliency,
                                    const vol::Volume& x, const vol::ProbVolume& prev,
                                    const vol::LabelMask* oracle, vol::Axis axis,
                                    int margin, int threads, int* fallback_slices);

void write_trace_json(const IterationTrace& trace,
                      const std::filesystem::path& path);

}  // namespace rstn::infer
