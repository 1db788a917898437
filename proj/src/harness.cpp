#include "rstn/harness.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace rstn::harness {

using nlohmann::json;

void ExperimentConfig::validate() const {
  require(folds >= 2, "fold count must be >= 2");
  require(method == "rstn" || method == "stagewise" || method == "mix",
          "method must be rstn, stagewise or mix");
  require(arch == "default" || arch == "tiny", "arch must be 'default' or 'tiny'");
  train_cfg.validate();
  infer_cfg.validate();
  saliency.validate();
}

int ExperimentConfig::effective_threads() const {
  return threads > 0 ? threads : default_thread_count();
}

train::NetConfig ExperimentConfig::net_config() const {
  train::NetConfig net;
  net.backbone = arch == "tiny" ? model::ArchDescriptor::tiny_backbone()
                                : model::ArchDescriptor::default_backbone();
  net.saliency = saliency;
  return net;
}

namespace {

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["corpus"] = c.corpus.string();
  j["folds"] = c.folds;
  j["method"] = c.method;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["train"] = {{"unroll-iterations", c.train_cfg.unroll_iterations},
                {"phase1-steps", c.train_cfg.phase1_steps},
                {"phase2-steps", c.train_cfg.phase2_steps},
                {"lr1", c.train_cfg.lr1},
                {"lr2", c.train_cfg.lr2},
                {"momentum", c.train_cfg.momentum},
                {"margin", c.train_cfg.margin}};
  j["inference"] = {{"max-iterations", c.infer_cfg.max_iterations},
                    {"threshold", c.infer_cfg.threshold},
                    {"margin", c.infer_cfg.margin},
                    {"oracle-boxes", c.infer_cfg.oracle_boxes}};
  j["model"] = {{"arch", c.arch},
                {"saliency-layers", c.saliency.layers},
                {"saliency-kernel", c.saliency.kernel},
                {"saliency-hidden", c.saliency.hidden}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("corpus")) c.corpus = j["corpus"].get<std::string>();
  if (j.contains("folds")) c.folds = j["folds"].get<int>();
  if (j.contains("method")) c.method = j["method"].get<std::string>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("threads")) c.threads = j["threads"].get<int>();
  if (j.contains("out")) c.out_dir = j["out"].get<std::string>();
  if (j.contains("train")) {
    const json& t = j["train"];
    if (t.contains("unroll-iterations"))
      c.train_cfg.unroll_iterations = t["unroll-iterations"].get<int>();
    if (t.contains("phase1-steps")) c.train_cfg.phase1_steps = t["phase1-steps"].get<int>();
    if (t.contains("phase2-steps")) c.train_cfg.phase2_steps = t["phase2-steps"].get<int>();
    if (t.contains("lr1")) c.train_cfg.lr1 = t["lr1"].get<double>();
    if (t.contains("lr2")) c.train_cfg.lr2 = t["lr2"].get<double>();
    if (t.contains("momentum")) c.train_cfg.momentum = t["momentum"].get<double>();
    if (t.contains("margin")) c.train_cfg.margin = t["margin"].get<int>();
  }
  if (j.contains("inference")) {
    const json& i = j["inference"];
    if (i.contains("max-iterations"))
      c.infer_cfg.max_iterations = i["max-iterations"].get<int>();
    if (i.contains("threshold")) c.infer_cfg.threshold = i["threshold"].get<double>();
    if (i.contains("margin")) c.infer_cfg.margin = i["margin"].get<int>();
    if (i.contains("oracle-boxes"))
      c.infer_cfg.oracle_boxes = i["oracle-boxes"].get<bool>();
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    if (m.contains("arch")) c.arch = m["arch"].get<std::string>();
    if (m.contains("saliency-layers")) c.saliency.layers = m["saliency-layers"].get<int>();
    if (m.contains("saliency-kernel")) c.saliency.kernel = m["saliency-kernel"].get<int>();
    if (m.contains("saliency-hidden")) c.saliency.hidden = m["saliency-hidden"].get<int>();
  }
  return c;
}

constexpr std::uint64_t kTagFolds = 0x666f6c6473ull;
constexpr std::uint64_t kTagTrain = 0x747261696eull;

std::string fold_dir_name(int fold) { return "fold" + std::to_string(fold); }

std::string bundle_base(const std::string& method, Viewpoint vp) {
  return method + "_" + viewpoint_name(vp);
}

}  // namespace

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), "cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw Error("malformed config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

train::TrainingSet LoadedCorpus::training_set(const std::vector<int>& idx) const {
  train::TrainingSet set;
  for (int i : idx) {
    set.volumes.push_back(&volumes[static_cast<std::size_t>(i)]);
    set.masks.push_back(&masks[static_cast<std::size_t>(i)]);
  }
  return set;
}

LoadedCorpus load_corpus(const std::filesystem::path& manifest) {
  LoadedCorpus c;
  c.entries = synth::read_manifest(manifest);
  c.volumes.reserve(c.entries.size());
  c.masks.reserve(c.entries.size());
  for (const synth::CorpusEntry& e : c.entries) {
    c.volumes.push_back(vol::load_volume(e.volume_path));
    c.masks.push_back(vol::load_mask(e.mask_path));
    require(c.volumes.back().extents == c.masks.back().extents,
            "corpus case " + e.id + " has mismatched volume/mask extents");
  }
  return c;
}

std::vector<std::vector<int>> fold_assignment(int n_cases, int folds,
                                              std::uint64_t seed) {
  require(folds >= 2, "fold count must be >= 2");
  require(n_cases >= folds, "corpus smaller than the fold count");
  std::vector<int> order(static_cast<std::size_t>(n_cases));
  for (int i = 0; i < n_cases; ++i) order[static_cast<std::size_t>(i)] = i;
  CounterRng rng(derive_seed(seed, kTagFolds));
  for (int i = n_cases - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::vector<std::vector<int>> out(static_cast<std::size_t>(folds));
  for (int i = 0; i < n_cases; ++i)
    out[static_cast<std::size_t>(i % folds)].push_back(order[static_cast<std::size_t>(i)]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

void require_same_fold_assignment(const std::vector<std::vector<int>>& a,
                                  const std::vector<std::vector<int>>& b) {
  require(a == b, "fold assignments differ; models were not trained on the "
                  "same folds");
}

namespace {

struct FoldModels {
  std::vector<std::array<model::ModelBundle, 3>> joint;        // per fold
  std::vector<std::array<baseline::StagewiseBundle, 3>> stage; // per fold
};

std::vector<int> complement(int n, const std::vector<int>& fold) {
  std::vector<int> out;
  std::vector<char> in_fold(static_cast<std::size_t>(n), 0);
  for (int i : fold) in_fold[static_cast<std::size_t>(i)] = 1;
  for (int i = 0; i < n; ++i)
    if (!in_fold[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

void write_run_json(const ExperimentConfig& cfg, const LoadedCorpus& corpus,
                    const std::vector<std::vector<int>>& folds) {
  json j = config_to_json(cfg);
  json ftest = json::array();
  json ftrain = json::array();
  const int n = static_cast<int>(corpus.size());
  for (const auto& fold : folds) {
    json ids = json::array();
    for (int i : fold) ids.push_back(corpus.entries[static_cast<std::size_t>(i)].id);
    ftest.push_back(ids);
    json tids = json::array();
    for (int i : complement(n, fold))
      tids.push_back(corpus.entries[static_cast<std::size_t>(i)].id);
    ftrain.push_back(tids);
  }
  j["fold-test-ids"] = ftest;
  j["fold-train-ids"] = ftrain;
  std::ofstream os(cfg.out_dir / "run.json");
  require(os.good(), "cannot write run.json");
  os << j.dump(2) << "\n";
}

// Per-fold training, flattened over (fold, viewpoint) for parallelism.
FoldModels train_folds(const ExperimentConfig& cfg, const LoadedCorpus& corpus,
                       const std::vector<std::vector<int>>& folds,
                       bool want_joint, bool want_stage) {
  const int nf = static_cast<int>(folds.size());
  FoldModels models;
  if (want_joint) models.joint.resize(static_cast<std::size_t>(nf));
  if (want_stage) models.stage.resize(static_cast<std::size_t>(nf));

  std::vector<train::TrainingSet> sets;
  sets.reserve(static_cast<std::size_t>(nf));
  for (int f = 0; f < nf; ++f)
    sets.push_back(corpus.training_set(
        complement(static_cast<int>(corpus.size()), folds[static_cast<std::size_t>(f)])));

  struct LogSlot {
    std::vector<train::TrainLogRecord> records;
  };
  std::vector<LogSlot> joint_logs(static_cast<std::size_t>(nf * 3));
  std::vector<LogSlot> stage_logs(static_cast<std::size_t>(nf * 3));

  const int methods = (want_joint ? 1 : 0) + (want_stage ? 1 : 0);
  const int tasks = nf * 3 * methods;
  parallel_for(tasks, cfg.effective_threads(), [&](int task) {
    const int per_method = nf * 3;
    const bool joint_task = want_joint && task < per_method;
    const int local = joint_task ? task : task - (want_joint ? per_method : 0);
    const int f = local / 3;
    const int v = local % 3;
    const Viewpoint vp = kViewpoints[v];
    const std::uint64_t seed =
        derive_seed(cfg.seed, kTagTrain + static_cast<std::uint64_t>(f));
    if (joint_task) {
      models.joint[static_cast<std::size_t>(f)][static_cast<std::size_t>(v)] =
          train::train_viewpoint(sets[static_cast<std::size_t>(f)], vp, cfg.train_cfg,
                                 cfg.net_config(), seed,
                                 &joint_logs[static_cast<std::size_t>(local)].records);
    } else {
      models.stage[static_cast<std::size_t>(f)][static_cast<std::size_t>(v)] =
          baseline::stagewise_train_viewpoint(
              sets[static_cast<std::size_t>(f)], vp, cfg.train_cfg, cfg.net_config(),
              seed, &stage_logs[static_cast<std::size_t>(local)].records);
    }
  });

  // Persist weights and logs in deterministic order.
  for (int f = 0; f < nf; ++f) {
    const auto fold_dir = cfg.out_dir / "folds" / fold_dir_name(f);
    std::filesystem::create_directories(fold_dir);
    for (int v = 0; v < 3; ++v) {
      const Viewpoint vp = kViewpoints[v];
      if (want_joint)
        model::save_bundle(models.joint[static_cast<std::size_t>(f)][static_cast<std::size_t>(v)],
                           fold_dir / bundle_base("rstn", vp), "rstn");
      if (want_stage)
        baseline::save_stagewise(
            models.stage[static_cast<std::size_t>(f)][static_cast<std::size_t>(v)],
            fold_dir / bundle_base("stagewise", vp), cfg.saliency);
    }
    // Merge logs by step with viewpoints interleaved.
    auto merge = [&](std::vector<LogSlot>& slots, const std::string& name) {
      std::vector<train::TrainLogRecord> merged;
      const auto& a = slots[static_cast<std::size_t>(f * 3)].records;
      const auto& b = slots[static_cast<std::size_t>(f * 3 + 1)].records;
      const auto& c = slots[static_cast<std::size_t>(f * 3 + 2)].records;
      const std::size_t steps = std::max({a.size(), b.size(), c.size()});
      for (std::size_t s = 0; s < steps; ++s) {
        if (s < a.size()) merged.push_back(a[s]);
        if (s < b.size()) merged.push_back(b[s]);
        if (s < c.size()) merged.push_back(c[s]);
      }
      const auto path = fold_dir / name;
      std::filesystem::remove(path);
      train::append_log_jsonl(merged, path);
    };
    if (want_joint) merge(joint_logs, "rstn_train_log.jsonl");
    if (want_stage) merge(stage_logs, "stagewise_train_log.jsonl");
  }
  return models;
}

struct EvalTask {
  int fold = 0;
  int case_index = 0;
};

report::Report evaluate_cases(const ExperimentConfig& cfg, const LoadedCorpus& corpus,
                              const std::vector<std::vector<int>>& folds,
                              const std::function<infer::EngineParams(int)>& engine_for_fold,
                              const std::string& report_name, bool emit_masks,
                              const std::string& method_label) {
  std::vector<EvalTask> tasks;
  for (int f = 0; f < static_cast<int>(folds.size()); ++f)
    for (int ci : folds[static_cast<std::size_t>(f)]) tasks.push_back({f, ci});
  std::sort(tasks.begin(), tasks.end(), [](const EvalTask& a, const EvalTask& b) {
    return a.case_index < b.case_index;
  });

  const auto trace_dir = cfg.out_dir / (report_name + "_traces");
  std::filesystem::create_directories(trace_dir);
  const auto mask_dir = cfg.out_dir / "masks";
  if (emit_masks) std::filesystem::create_directories(mask_dir);

  std::vector<report::CaseResult> results(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), cfg.effective_threads(), [&](int i) {
    const EvalTask& t = tasks[static_cast<std::size_t>(i)];
    const auto& entry = corpus.entries[static_cast<std::size_t>(t.case_index)];
    const vol::Volume& x = corpus.volumes[static_cast<std::size_t>(t.case_index)];
    const vol::LabelMask& y = corpus.masks[static_cast<std::size_t>(t.case_index)];
    const infer::EngineParams params = engine_for_fold(t.fold);
    const vol::LabelMask* oracle = cfg.infer_cfg.oracle_boxes ? &y : nullptr;
    const auto res = infer::run_engine(params, x, oracle, cfg.infer_cfg, 1);

    report::CaseResult r;
    r.id = entry.id;
    r.dsc = vol::dsc(res.mask, y);
    r.coarse_dsc = vol::dsc(res.trace.z0, y);
    r.iterations = res.trace.iteration_count();
    r.termination = res.trace.termination;
    r.d_seq = res.trace.d_sequence();
    r.z0_empty = res.trace.z0_empty;
    results[static_cast<std::size_t>(i)] = std::move(r);

    infer::write_trace_json(res.trace, trace_dir / (entry.id + ".trace.json"));
    if (emit_masks) vol::save_mask(res.mask, mask_dir / (entry.id + ".mask.json"));
  });

  report::Report rep = report::make_report(method_label, std::move(results), cfg.infer_cfg);
  report::write_report_json(rep, cfg.out_dir / (report_name + ".json"));
  report::write_report_csv(rep, cfg.out_dir / (report_name + ".csv"));
  return rep;
}

}  // namespace

report::Report crossval(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.validate();
  require(c.method == "rstn" || c.method == "stagewise",
          "crossval runs method rstn or stagewise; use crossval_mix for mix");
  std::filesystem::create_directories(c.out_dir);
  const LoadedCorpus corpus = load_corpus(c.corpus);
  const auto folds =
      fold_assignment(static_cast<int>(corpus.size()), c.folds, c.seed);
  write_run_json(c, corpus, folds);

  const bool joint = c.method == "rstn";
  FoldModels models = train_folds(c, corpus, folds, joint, !joint);

  auto engine_for_fold = [&](int f) {
    return joint ? infer::engine_params(models.joint[static_cast<std::size_t>(f)], true)
                 : baseline::stagewise_engine_params(models.stage[static_cast<std::size_t>(f)]);
  };
  return evaluate_cases(c, corpus, folds, engine_for_fold, "report", true, c.method);
}

std::vector<baseline::MixEntry> crossval_mix(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.validate();
  std::filesystem::create_directories(c.out_dir);
  const LoadedCorpus corpus = load_corpus(c.corpus);
  const auto folds =
      fold_assignment(static_cast<int>(corpus.size()), c.folds, c.seed);
  write_run_json(c, corpus, folds);
  FoldModels models = train_folds(c, corpus, folds, true, true);

  std::vector<baseline::MixEntry> combined;
  for (int f = 0; f < static_cast<int>(folds.size()); ++f) {
    std::vector<baseline::MixCase> cases;
    for (int ci : folds[static_cast<std::size_t>(f)]) {
      cases.push_back({&corpus.volumes[static_cast<std::size_t>(ci)],
                       &corpus.masks[static_cast<std::size_t>(ci)]});
    }
    auto entries = baseline::mix_and_match(models.joint[static_cast<std::size_t>(f)],
                                           models.stage[static_cast<std::size_t>(f)],
                                           cases, c.infer_cfg, c.effective_threads());
    if (combined.empty()) {
      combined = std::move(entries);
    } else {
      for (std::size_t i = 0; i < combined.size(); ++i) {
        auto& dst = combined[i].per_case;
        dst.insert(dst.end(), entries[i].per_case.begin(), entries[i].per_case.end());
      }
    }
  }
  // Recompute aggregates over all folds.
  for (auto& e : combined) {
    const auto agg = report::aggregate(e.per_case);
    e.mean = agg.mean;
    e.stddev = agg.stddev;
  }

  json j = json::array();
  for (const auto& e : combined) {
    j.push_back({{"coarse-from", baseline::source_name(e.coarse_from)},
                 {"fine-from", baseline::source_name(e.fine_from)},
                 {"mean", e.mean},
                 {"std", e.stddev},
                 {"cases", e.per_case.size()}});
  }
  std::ofstream os(c.out_dir / "mix_report.json");
  require(os.good(), "cannot write mix_report.json");
  os << j.dump(2) << "\n";
  return combined;
}

report::Report evaluate_folds(const ExperimentConfig& cfg,
                              const std::filesystem::path& run_dir,
                              const std::string& report_name) {
  ExperimentConfig c = cfg;
  c.validate();
  std::filesystem::create_directories(c.out_dir);
  std::ifstream is(run_dir / "run.json");
  require(is.good(), "cannot open " + (run_dir / "run.json").string());
  json run;
  is >> run;
  const std::string method = run.at("method").get<std::string>();
  require(method == "rstn" || method == "stagewise",
          "evaluate_folds supports rstn/stagewise runs");

  const LoadedCorpus corpus = load_corpus(c.corpus);
  // Rebuild fold index lists from the recorded ids.
  std::vector<std::vector<int>> folds;
  for (const auto& fold_ids : run.at("fold-test-ids")) {
    std::vector<int> fold;
    for (const auto& id : fold_ids) {
      const std::string want = id.get<std::string>();
      bool found = false;
      for (std::size_t i = 0; i < corpus.entries.size(); ++i) {
        if (corpus.entries[i].id == want) {
          fold.push_back(static_cast<int>(i));
          found = true;
          break;
        }
      }
      require(found, "run.json case id '" + want + "' missing from corpus");
    }
    folds.push_back(std::move(fold));
  }

  const bool joint = method == "rstn";
  std::vector<std::array<model::ModelBundle, 3>> jbundles;
  std::vector<std::array<baseline::StagewiseBundle, 3>> sbundles;
  for (int f = 0; f < static_cast<int>(folds.size()); ++f) {
    const auto fold_dir = run_dir / "folds" / fold_dir_name(f);
    if (joint) {
      std::array<model::ModelBundle, 3> b;
      for (int v = 0; v < 3; ++v)
        b[static_cast<std::size_t>(v)] =
            model::load_bundle(fold_dir / bundle_base("rstn", kViewpoints[v]));
      jbundles.push_back(std::move(b));
    } else {
      std::array<baseline::StagewiseBundle, 3> b;
      for (int v = 0; v < 3; ++v)
        b[static_cast<std::size_t>(v)] = baseline::load_stagewise(
            fold_dir / bundle_base("stagewise", kViewpoints[v]));
      sbundles.push_back(std::move(b));
    }
  }

  auto engine_for_fold = [&](int f) {
    return joint
               ? infer::engine_params(jbundles[static_cast<std::size_t>(f)], true)
               : baseline::stagewise_engine_params(sbundles[static_cast<std::size_t>(f)]);
  };
  return evaluate_cases(c, corpus, folds, engine_for_fold, report_name, false, method);
}

void train_full(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.validate();
  std::filesystem::create_directories(c.out_dir);
  const LoadedCorpus corpus = load_corpus(c.corpus);
  std::vector<int> all;
  for (int i = 0; i < static_cast<int>(corpus.size()); ++i) all.push_back(i);
  const train::TrainingSet set = corpus.training_set(all);
  const std::uint64_t seed = derive_seed(c.seed, kTagTrain);

  if (c.method == "rstn") {
    train::TrainedModel m =
        train::train(set, c.train_cfg, c.net_config(), seed, c.effective_threads());
    for (int v = 0; v < 3; ++v)
      model::save_bundle(m.bundles[static_cast<std::size_t>(v)],
                         c.out_dir / bundle_base("rstn", kViewpoints[v]), "rstn");
    const auto log_path = c.out_dir / "train_log.jsonl";
    std::filesystem::remove(log_path);
    train::append_log_jsonl(m.log, log_path);
  } else if (c.method == "stagewise") {
    baseline::StagewiseModel m = baseline::stagewise_train(
        set, c.train_cfg, c.net_config(), seed, c.effective_threads());
    for (int v = 0; v < 3; ++v)
      baseline::save_stagewise(m.bundles[static_cast<std::size_t>(v)],
                               c.out_dir / bundle_base("stagewise", kViewpoints[v]),
                               c.saliency);
    const auto log_path = c.out_dir / "train_log.jsonl";
    std::filesystem::remove(log_path);
    train::append_log_jsonl(m.log, log_path);
  } else {
    throw Error("train_full: method must be rstn or stagewise");
  }
}

namespace {

infer::EngineParams load_engine_from_dir(const std::filesystem::path& dir,
                                         const std::string& method,
                                         std::vector<model::ModelBundle>& jstore,
                                         std::vector<baseline::StagewiseBundle>& sstore) {
  infer::EngineParams p;
  if (method == "rstn") {
    jstore.clear();
    jstore.reserve(3);
    for (int v = 0; v < 3; ++v)
      jstore.push_back(model::load_bundle(dir / bundle_base("rstn", kViewpoints[v])));
    for (int v = 0; v < 3; ++v) {
      p.coarse[static_cast<std::size_t>(v)] = &jstore[static_cast<std::size_t>(v)].coarse;
      p.fine[static_cast<std::size_t>(v)] = &jstore[static_cast<std::size_t>(v)].fine;
      p.saliency[static_cast<std::size_t>(v)] = &jstore[static_cast<std::size_t>(v)].saliency;
    }
  } else if (method == "stagewise") {
    sstore.clear();
    sstore.reserve(3);
    for (int v = 0; v < 3; ++v)
      sstore.push_back(
          baseline::load_stagewise(dir / bundle_base("stagewise", kViewpoints[v])));
    for (int v = 0; v < 3; ++v) {
      p.coarse[static_cast<std::size_t>(v)] = &sstore[static_cast<std::size_t>(v)].coarse;
      p.fine[static_cast<std::size_t>(v)] = &sstore[static_cast<std::size_t>(v)].fine;
      p.saliency[static_cast<std::size_t>(v)] = nullptr;
    }
  } else {
    throw Error("unsupported method '" + method + "'");
  }
  return p;
}

}  // namespace

report::Report eval_full(const ExperimentConfig& cfg,
                         const std::filesystem::path& weights_dir) {
  ExperimentConfig c = cfg;
  c.validate();
  std::filesystem::create_directories(c.out_dir);
  const LoadedCorpus corpus = load_corpus(c.corpus);
  std::vector<model::ModelBundle> jstore;
  std::vector<baseline::StagewiseBundle> sstore;
  const infer::EngineParams params =
      load_engine_from_dir(weights_dir, c.method, jstore, sstore);

  std::vector<std::vector<int>> pseudo_folds(1);
  for (int i = 0; i < static_cast<int>(corpus.size()); ++i)
    pseudo_folds[0].push_back(i);
  auto engine_for_fold = [&](int) { return params; };
  return evaluate_cases(c, corpus, pseudo_folds, engine_for_fold, "report", true,
                        c.method);
}

InferOutcome infer_volume(const ExperimentConfig& cfg,
                          const std::filesystem::path& weights_dir,
                          const std::filesystem::path& volume_path,
                          const std::optional<std::filesystem::path>& mask_path) {
  ExperimentConfig c = cfg;
  c.validate();
  const vol::Volume x = vol::load_volume(volume_path);
  std::optional<vol::LabelMask> y;
  if (mask_path) y = vol::load_mask(*mask_path);
  require(!c.infer_cfg.oracle_boxes || y.has_value(),
          "--oracle-boxes needs a ground-truth mask");

  std::vector<model::ModelBundle> jstore;
  std::vector<baseline::StagewiseBundle> sstore;
  const infer::EngineParams params =
      load_engine_from_dir(weights_dir, c.method, jstore, sstore);
  const vol::LabelMask* oracle =
      c.infer_cfg.oracle_boxes && y ? &y.value() : nullptr;
  auto res = infer::run_engine(params, x, oracle, c.infer_cfg, c.effective_threads());
  return InferOutcome{std::move(res.mask), std::move(res.trace)};
}

// --- gradcheck ---------------------------------------------------------------

namespace {

model::ModelBundle gradcheck_bundle() {
  model::SaliencyConfig scfg;
  scfg.layers = 2;
  scfg.kernel = 3;
  scfg.hidden = 4;
  model::ModelBundle bundle = model::init_bundle(
      Viewpoint::axial, model::ArchDescriptor::tiny_backbone(), scfg, 9157);
  // A generic point for the check: randomize the saliency output layer,
  // which training would start at zero.
  CounterRng rng(derive_seed(9157, 0x677261ull));
  for (double& v : bundle.saliency.kernels.back().data) v = 0.3 * rng.next_normal();
  for (double& v : bundle.saliency.biases.back().data) v = 0.1 * rng.next_normal();
  return bundle;
}

}  // namespace

GradcheckReport run_gradcheck() {
  GradcheckReport rep;
  model::ModelBundle bundle = gradcheck_bundle();

  CounterRng rng(4242);
  tc::Tensor stack = tc::Tensor::zeros({3, 9, 9});
  for (double& v : stack.data) v = rng.next_unit();
  tc::Tensor y = tc::Tensor::zeros({1, 9, 9});
  for (int r = 2; r <= 5; ++r)
    for (int c = 3; c <= 6; ++c) y.at3(0, r, c) = 1.0;

  train::TrainConfig cfg;
  cfg.margin = 2;

  auto params = model::named_params(bundle);
  std::vector<tc::Tensor*> ptrs;
  for (auto& p : params) ptrs.push_back(p.tensor);

  for (int T : {1, 2}) {
    cfg.unroll_iterations = T;
    const auto step = train::unrolled_step(bundle, stack, y, cfg, 1);
    auto loss_fn = [&]() {
      return train::unrolled_loss(bundle, stack, y, cfg, 1);
    };
    const auto res = tc::check_gradients(loss_fn, ptrs, step.gradients, 1e-5);
    if (T == 1)
      rep.max_rel_error_t1 = res.max_rel_error;
    else
      rep.max_rel_error_t2 = res.max_rel_error;
    rep.coords_checked += res.coords_checked;
    rep.coords_skipped += res.coords_skipped;
  }
  return rep;
}

}  // namespace rstn::harness
