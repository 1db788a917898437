#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rstn/inference.hpp"

namespace rstn::report {

struct CaseResult {
  std::string id;
  double dsc = 0.0;         // final mask vs full-volume ground truth
  double coarse_dsc = 0.0;  // Z^(0) vs ground truth
  int iterations = 0;       // fine iterations executed
  infer::Termination termination = infer::Termination::max_iterations;
  std::vector<double> d_seq;
  bool z0_empty = false;
};

struct Aggregates {
  double mean = 0.0;
  double stddev = 0.0;
  double max = 0.0;
  double min = 0.0;
};

Aggregates aggregate(const std::vector<double>& values);

struct DTableEntry {
  int t = 0;
  double mean_d = 0.0;
  int cases = 0;  // cases still iterating at t
};

struct Report {
  std::string method;
  double threshold = 0.0;
  int max_iterations = 0;
  bool oracle_mode = false;
  std::vector<CaseResult> cases;
  Aggregates dsc;
  Aggregates coarse;
  std::vector<DTableEntry> d_table;  // t in {1,2,3,5,10}, capped at observed
  double convergence_rate = 0.0;     // fraction terminated by threshold
  double mean_d1 = 0.0;
};

Report make_report(const std::string& method, std::vector<CaseResult> cases,
                   const infer::InferenceConfig& cfg);

void write_report_json(const Report& r, const std::filesystem::path& path);
// One row per case: id, dsc, iterations, termination.
void write_report_csv(const Report& r, const std::filesystem::path& path);

}  // namespace rstn::report
