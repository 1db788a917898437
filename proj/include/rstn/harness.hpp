#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rstn/baseline.hpp"
#include "rstn/inference.hpp"
#include "rstn/report.hpp"
#include "rstn/synthgen.hpp"
#include "rstn/train.hpp"

namespace rstn::harness {

struct ExperimentConfig {
  std::filesystem::path corpus;  // manifest path
  int folds = 4;
  std::string method = "rstn";  // rstn | stagewise | mix
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = hardware concurrency
  std::filesystem::path out_dir = "out";
  train::TrainConfig train_cfg;
  infer::InferenceConfig infer_cfg;
  std::string arch = "default";  // default | tiny
  model::SaliencyConfig saliency;

  void validate() const;
  int effective_threads() const;
  train::NetConfig net_config() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

struct LoadedCorpus {
  std::vector<synth::CorpusEntry> entries;
  std::vector<vol::Volume> volumes;
  std::vector<vol::LabelMask> masks;

  std::size_t size() const { return entries.size(); }
  train::TrainingSet training_set(const std::vector<int>& case_indices) const;
};

// Loads every case up front; missing or malformed files reject the run
// before any training starts.
LoadedCorpus load_corpus(const std::filesystem::path& manifest);

// Pure function of (case count, fold count, seed): seeded shuffle dealt
// round-robin, fold sizes differing by at most one, disjoint and exhaustive.
std::vector<std::vector<int>> fold_assignment(int n_cases, int folds,
                                              std::uint64_t seed);

void require_same_fold_assignment(const std::vector<std::vector<int>>& a,
                                  const std::vector<std::vector<int>>& b);

// Cross-validation: trains per-fold models on the fold complement, then
// evaluates each case exactly once with its fold's model. Writes weights,
// logs, traces, predicted masks, report.{json,csv} and run.json under
// cfg.out_dir. Deterministic given the config.
report::Report crossval(const ExperimentConfig& cfg);

// 2x2 coarse/fine source table (method "mix"): trains both the joint and
// the stage-wise models on the same folds.
std::vector<baseline::MixEntry> crossval_mix(const ExperimentConfig& cfg);

// Re-evaluates an existing crossval output directory (fold weights and
// fold assignment from run.json), e.g. with oracle boxes enabled. Writes
// <report_name>.{json,csv} and per-case traces under cfg.out_dir.
report::Report evaluate_folds(const ExperimentConfig& cfg,
                              const std::filesystem::path& run_dir,
                              const std::string& report_name);

// Whole-corpus training (no folds); weights land in cfg.out_dir.
void train_full(const ExperimentConfig& cfg);

// Evaluates a train_full output over the corpus.
report::Report eval_full(const ExperimentConfig& cfg,
                         const std::filesystem::path& weights_dir);

// Single-volume inference.
struct InferOutcome {
  vol::LabelMask mask;
  infer::IterationTrace trace;
};
InferOutcome infer_volume(const ExperimentConfig& cfg,
                          const std::filesystem::path& weights_dir,
                          const std::filesystem::path& volume_path,
                          const std::optional<std::filesystem::path>& mask_path);

// Finite-difference audit of the full unrolled loss on a 9x9 fixture with
// the tiny backbone, phases as in training (ground-truth reference maps).
struct GradcheckReport {
  double max_rel_error_t1 = 0.0;
  double max_rel_error_t2 = 0.0;
  std::int64_t coords_checked = 0;
  std::int64_t coords_skipped = 0;
  double tolerance = 1e-4;

  double worst() const {
    return max_rel_error_t1 > max_rel_error_t2 ? max_rel_error_t1
                                               : max_rel_error_t2;
  }
  bool pass() const { return worst() <= tolerance; }
};

GradcheckReport run_gradcheck();

}  // namespace rstn::harness
