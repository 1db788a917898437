// rstn: command-line front end for the recurrent coarse-to-fine
// segmentation experiments (synthgen / train / infer / eval / crossval /
// gradcheck). Failures exit nonzero with an error JSON on stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rstn/harness.hpp"
#include "rstn/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string backend = "auto";
  int threads = 0;

  std::string method;
  std::optional<double> thr;
  std::optional<int> max_iter;
  std::optional<int> margin;
  std::optional<int> saliency_kernel;
  std::optional<int> saliency_layers;
  bool oracle_boxes = false;
};

void add_global_flags(CLI::App* app, GlobalFlags& g) {
  app->add_option("--config", g.config_path, "experiment config JSON");
  app->add_option("--seed", g.seed, "seed override (u64)");
  app->add_option("--out", g.out_dir, "output directory");
  app->add_option("--backend", g.backend, "kernel backend: scalar|avx2|auto");
  app->add_option("--threads", g.threads, "worker threads (0 = hardware)");
  app->add_option("--method", g.method, "rstn|stagewise|mix");
  app->add_option("--thr", g.thr, "inter-iteration DSC threshold");
  app->add_option("--max-iter", g.max_iter, "max testing iterations");
  app->add_option("--margin", g.margin, "crop margin K (default 20)");
  app->add_option("--saliency-kernel", g.saliency_kernel, "1|3|5");
  app->add_option("--saliency-layers", g.saliency_layers, "1|2");
  app->add_flag("--oracle-boxes", g.oracle_boxes,
                "crop by ground-truth boxes during testing");
}

rstn::harness::ExperimentConfig make_config(const GlobalFlags& g) {
  rstn::harness::ExperimentConfig cfg;
  if (!g.config_path.empty()) cfg = rstn::harness::load_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  if (!g.method.empty()) cfg.method = g.method;
  if (g.thr) cfg.infer_cfg.threshold = *g.thr;
  if (g.max_iter) cfg.infer_cfg.max_iterations = *g.max_iter;
  if (g.margin) {
    cfg.infer_cfg.margin = *g.margin;
    cfg.train_cfg.margin = *g.margin;
  }
  if (g.saliency_kernel) cfg.saliency.kernel = *g.saliency_kernel;
  if (g.saliency_layers) cfg.saliency.layers = *g.saliency_layers;
  if (g.oracle_boxes) cfg.infer_cfg.oracle_boxes = true;
  if (g.threads > 0) cfg.threads = g.threads;
  rstn::kernels::force_backend(rstn::kernels::backend_from_name(g.backend));
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"recurrent coarse-to-fine segmentation experiments"};
  app.require_subcommand(1);

  GlobalFlags g;

  auto* synth = app.add_subcommand("synthgen", "generate a phantom corpus");
  std::string phantom_path;
  int cases = 48;
  std::uint64_t seed_base = 1000;
  synth->add_option("--phantom", phantom_path, "PhantomSpec JSON")->required();
  synth->add_option("--cases", cases, "number of cases");
  synth->add_option("--seed-base", seed_base, "per-case seeds are seed-base+i");
  add_global_flags(synth, g);

  auto* train_cmd = app.add_subcommand("train", "train on the whole corpus");
  add_global_flags(train_cmd, g);

  auto* infer_cmd = app.add_subcommand("infer", "segment one volume");
  std::string weights_dir, volume_path, mask_path;
  infer_cmd->add_option("--weights", weights_dir, "weights directory")->required();
  infer_cmd->add_option("--volume", volume_path, "RVOL volume header")->required();
  infer_cmd->add_option("--mask", mask_path, "ground-truth mask (oracle mode)");
  add_global_flags(infer_cmd, g);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate weights over a corpus");
  std::string eval_weights;
  eval_cmd->add_option("--weights", eval_weights, "weights directory")->required();
  add_global_flags(eval_cmd, g);

  auto* cv = app.add_subcommand("crossval", "k-fold cross-validation");
  add_global_flags(cv, g);

  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference audit of the unrolled loss");
  add_global_flags(gc, g);

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    const auto cfg = make_config(g);
    auto spec = rstn::synth::phantom_spec_from_json_file(phantom_path);
    const auto corpus = rstn::synth::generate_corpus(spec, cases, seed_base);
    const fs::path dir = cfg.out_dir.empty() ? fs::path("corpus") : cfg.out_dir;
    const auto manifest = rstn::synth::write_corpus(corpus, spec, seed_base, dir);
    json j;
    j["manifest"] = manifest.string();
    j["cases"] = cases;
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  if (train_cmd->parsed()) {
    const auto cfg = make_config(g);
    rstn::harness::train_full(cfg);
    json j;
    j["weights"] = cfg.out_dir.string();
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  if (infer_cmd->parsed()) {
    const auto cfg = make_config(g);
    std::optional<fs::path> mask;
    if (!mask_path.empty()) mask = fs::path(mask_path);
    const auto out = rstn::harness::infer_volume(cfg, weights_dir, volume_path, mask);
    fs::create_directories(cfg.out_dir);
    const fs::path mask_out = cfg.out_dir / "prediction.mask.json";
    rstn::vol::save_mask(out.mask, mask_out);
    rstn::infer::write_trace_json(out.trace, cfg.out_dir / "prediction.trace.json");
    json j;
    j["mask"] = mask_out.string();
    j["iterations"] = out.trace.iteration_count();
    j["termination"] = out.trace.termination == rstn::infer::Termination::threshold
                           ? "threshold"
                           : "max-iterations";
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  if (eval_cmd->parsed()) {
    const auto cfg = make_config(g);
    const auto rep = rstn::harness::eval_full(cfg, eval_weights);
    json j;
    j["report"] = (cfg.out_dir / "report.json").string();
    j["mean"] = rep.dsc.mean;
    j["std"] = rep.dsc.stddev;
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  if (cv->parsed()) {
    const auto cfg = make_config(g);
    json j;
    if (cfg.method == "mix") {
      const auto entries = rstn::harness::crossval_mix(cfg);
      j["report"] = (cfg.out_dir / "mix_report.json").string();
      for (const auto& e : entries) {
        j["combos"].push_back(
            {{"coarse-from", rstn::baseline::source_name(e.coarse_from)},
             {"fine-from", rstn::baseline::source_name(e.fine_from)},
             {"mean", e.mean}});
      }
    } else {
      const auto rep = rstn::harness::crossval(cfg);
      j["report"] = (cfg.out_dir / "report.json").string();
      j["mean"] = rep.dsc.mean;
      j["std"] = rep.dsc.stddev;
      j["convergence-rate"] = rep.convergence_rate;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  if (gc->parsed()) {
    make_config(g);  // honors --backend
    const auto rep = rstn::harness::run_gradcheck();
    json j;
    j["max-rel-error-t1"] = rep.max_rel_error_t1;
    j["max-rel-error-t2"] = rep.max_rel_error_t2;
    j["coords-checked"] = rep.coords_checked;
    j["coords-skipped"] = rep.coords_skipped;
    j["tolerance"] = rep.tolerance;
    j["pass"] = rep.pass();
    std::cout << j.dump(2) << "\n";
    return rep.pass() ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
}
