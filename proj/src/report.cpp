#include "rstn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace rstn::report {

using nlohmann::json;

Aggregates aggregate(const std::vector<double>& values) {
  require(!values.empty(), "cannot aggregate an empty value list");
  Aggregates a;
  a.max = values[0];
  a.min = values[0];
  for (double v : values) {
    a.mean += v;
    a.max = std::max(a.max, v);
    a.min = std::min(a.min, v);
  }
  a.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - a.mean) * (v - a.mean);
  a.stddev = std::sqrt(var / static_cast<double>(values.size()));
  return a;
}

Report make_report(const std::string& method, std::vector<CaseResult> cases,
                   const infer::InferenceConfig& cfg) {
  require(!cases.empty(), "report needs at least one case");
  Report r;
  r.method = method;
  r.threshold = cfg.threshold;
  r.max_iterations = cfg.max_iterations;
  r.oracle_mode = cfg.oracle_boxes;
  r.cases = std::move(cases);

  std::vector<double> dscs, coarse;
  int converged = 0;
  int max_observed = 0;
  double d1_sum = 0.0;
  int d1_count = 0;
  for (const CaseResult& c : r.cases) {
    dscs.push_back(c.dsc);
    coarse.push_back(c.coarse_dsc);
    if (c.termination == infer::Termination::threshold) ++converged;
    max_observed = std::max(max_observed, static_cast<int>(c.d_seq.size()));
    if (!c.d_seq.empty()) {
      d1_sum += c.d_seq[0];
      ++d1_count;
    }
  }
  r.dsc = aggregate(dscs);
  r.coarse = aggregate(coarse);
  r.convergence_rate =
      static_cast<double>(converged) / static_cast<double>(r.cases.size());
  r.mean_d1 = d1_count > 0 ? d1_sum / d1_count : 0.0;

  for (int t : {1, 2, 3, 5, 10}) {
    if (t > max_observed) break;
    DTableEntry e;
    e.t = t;
    for (const CaseResult& c : r.cases) {
      if (static_cast<int>(c.d_seq.size()) >= t) {
        e.mean_d += c.d_seq[static_cast<std::size_t>(t - 1)];
        ++e.cases;
      }
    }
    if (e.cases > 0) e.mean_d /= static_cast<double>(e.cases);
    r.d_table.push_back(e);
  }
  return r;
}

namespace {

const char* term_name(infer::Termination t) {
  return t == infer::Termination::threshold ? "threshold" : "max-iterations";
}

}  // namespace

void write_report_json(const Report& r, const std::filesystem::path& path) {
  json j;
  j["method"] = r.method;
  j["threshold"] = r.threshold;
  j["max-iterations"] = r.max_iterations;
  j["oracle-mode"] = r.oracle_mode;
  j["mean"] = r.dsc.mean;
  j["std"] = r.dsc.stddev;
  j["max"] = r.dsc.max;
  j["min"] = r.dsc.min;
  j["coarse-mean"] = r.coarse.mean;
  j["coarse-std"] = r.coarse.stddev;
  j["convergence-rate"] = r.convergence_rate;
  j["mean-d1"] = r.mean_d1;
  json dt = json::array();
  for (const DTableEntry& e : r.d_table)
    dt.push_back({{"t", e.t}, {"mean-d", e.mean_d}, {"cases", e.cases}});
  j["d-table"] = dt;
  json cases = json::array();
  for (const CaseResult& c : r.cases) {
    cases.push_back({{"id", c.id},
                     {"dsc", c.dsc},
                     {"coarse-dsc", c.coarse_dsc},
                     {"iterations", c.iterations},
                     {"termination", term_name(c.termination)},
                     {"d-sequence", c.d_seq},
                     {"z0-empty", c.z0_empty}});
  }
  j["cases"] = cases;
  std::ofstream os(path);
  require(os.good(), "cannot write report " + path.string());
  os << j.dump(2) << "\n";
}

void write_report_csv(const Report& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  require(os.good(), "cannot write report " + path.string());
  os << "id,dsc,iterations,termination\n";
  char buf[64];
  for (const CaseResult& c : r.cases) {
    std::snprintf(buf, sizeof(buf), "%.17g", c.dsc);
    os << c.id << "," << buf << "," << c.iterations << "," << term_name(c.termination)
       << "\n";
  }
}

}  // namespace rstn::report
