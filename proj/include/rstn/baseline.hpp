#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rstn/inference.hpp"
#include "rstn/model.hpp"
#include "rstn/train.hpp"

namespace rstn::baseline {

// Stage-wise coarse-to-fine model: coarse and fine networks trained
// individually, no saliency transform. The fine network only ever sees
// regions cropped by ground-truth boxes (+K margin) during training.
struct StagewiseBundle {
  Viewpoint viewpoint = Viewpoint::axial;
  model::BackboneParams coarse;
  model::BackboneParams fine;
};

struct StagewiseModel {
  std::array<StagewiseBundle, 3> bundles;
  std::vector<train::TrainLogRecord> log;
};

// Each network runs the full phase1+phase2 step budget with the same
// learning-rate schedule, optimizer, loss and sampling scheme as the
// joint training, so comparisons measure method rather than compute.
StagewiseBundle stagewise_train_viewpoint(const train::TrainingSet& data,
                                          Viewpoint vp, const train::TrainConfig& cfg,
                                          const train::NetConfig& net,
                                          std::uint64_t seed,
                                          std::vector<train::TrainLogRecord>* log);

StagewiseModel stagewise_train(const train::TrainingSet& data,
                               const train::TrainConfig& cfg,
                               const train::NetConfig& net, std::uint64_t seed,
                               int threads);

// Iterative testing with bounding-box cropping only: identical engine to
// segment_volume with the saliency product disabled.
infer::SegmentationResult stagewise_infer(const std::array<StagewiseBundle, 3>& bundles,
                                          const vol::Volume& x,
                                          const infer::InferenceConfig& cfg,
                                          int threads = 1);

infer::EngineParams stagewise_engine_params(const std::array<StagewiseBundle, 3>& b);

// Serialization adapter: stagewise bundles are stored as RSTN-W v1 files of
// kind "stagewise" with an identity-weighting saliency block.
void save_stagewise(const StagewiseBundle& b, const std::filesystem::path& path_base,
                    const model::SaliencyConfig& scfg);
StagewiseBundle load_stagewise(const std::filesystem::path& path_base);

enum class Source { stagewise, joint };

struct MixEntry {
  Source coarse_from;
  Source fine_from;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> per_case;
};

struct MixCase {
  const vol::Volume* volume;
  const vol::LabelMask* mask;
};

// 4.4.1-style 2x2 evaluation. All four combinations run the shared engine;
// the saliency product is applied exactly when the fine network comes from
// the jointly trained model.
std::vector<MixEntry> mix_and_match(const std::array<model::ModelBundle, 3>& joint,
                                    const std::array<StagewiseBundle, 3>& stagewise,
                                    const std::vector<MixCase>& cases,
                                    const infer::InferenceConfig& cfg, int threads);

const char* source_name(Source s);

}  // namespace rstn::baseline
