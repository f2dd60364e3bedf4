// em3rf: generate | pretrain-seg | train | assemble | eval | certify
#include "em3rf/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

using namespace em3rf;

namespace {

enum Exit { ok = 0, generic = 1, config_error = 2, data_error = 3, certification_failure = 4, divergence = 5 };

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string data_dir;
  std::string workdir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_file, "JSON config file");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set flow.steps=200")->take_all();
  cmd->add_option("--seed", c.seed, "Seed (overrides the config file and EM3RF_SEED)");
  cmd->add_option("-j,--jobs", c.jobs, "Worker threads for per-object work")->check(CLI::PositiveNumber);
  cmd->add_option("--data", c.data_dir, "Dataset directory");
  cmd->add_option("--workdir", c.workdir, "Directory for checkpoints, logs and reports");
}

Config resolve(const Common& c, std::vector<std::string> extra) {
  nlohmann::json doc = nlohmann::json::object();
  if (!c.config_file.empty()) doc = config_to_json(load_config(c.config_file));
  if (!c.data_dir.empty()) extra.push_back("dataset.dir=" + nlohmann::json(c.data_dir).dump());
  if (!c.workdir.empty()) extra.push_back("workdir=" + nlohmann::json(c.workdir).dump());
  if (c.jobs) extra.push_back("jobs=" + std::to_string(*c.jobs));
  for (const auto& s : c.sets) apply_override(doc, s);
  for (const auto& s : extra) apply_override(doc, s);
  Config cfg = config_from_json(doc);
  apply_environment(cfg);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

template <typename T>
void maybe(std::vector<std::string>& extra, const std::string& key, const std::optional<T>& v) {
  if (v) extra.push_back(key + "=" + nlohmann::json(*v).dump());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rigid multi-fragment reassembly with SE(3) flow matching"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "Write a synthetic fractured dataset");
  add_common(gen, common);
  std::optional<int> objects, fragments;
  gen->add_option("--objects", objects, "Number of objects");
  gen->add_option("--fragments", fragments, "Fragments per object");

  auto* seg = app.add_subcommand("pretrain-seg", "Pretrain the encoder on fracture-boundary segmentation");
  add_common(seg, common);
  std::optional<int> epochs;
  bool resume = false;
  seg->add_option("--epochs", epochs, "Training epochs (0 writes the initialization)");
  seg->add_flag("--resume", resume, "Continue from the existing encoder checkpoint");

  auto* train = app.add_subcommand("train", "Train the velocity network");
  add_common(train, common);
  std::optional<int> steps;
  std::optional<double> alpha;
  train->add_option("--steps", steps, "Optimizer steps");
  train->add_option("--alpha", alpha, "No-overlap loss weight");

  auto* asmb = app.add_subcommand("assemble", "Assemble objects and export posed PLYs and poses");
  add_common(asmb, common);
  std::vector<std::string> manifests;
  std::string out_dir;
  std::optional<std::string> mode;
  asmb->add_option("manifests", manifests, "Object manifests (.json)")->required()->check(CLI::ExistingFile);
  asmb->add_option("-o,--out", out_dir, "Output directory (default <workdir>/assembled)");
  asmb->add_option("--mode", mode, "Start mode: sample_p0 or identity_start");
  asmb->add_option("--steps", steps, "Integration steps");

  auto* eval = app.add_subcommand("eval", "Score the held-out objects and write report.csv/json");
  add_common(eval, common);
  eval->add_option("--mode", mode, "Start mode: sample_p0 or identity_start");

  auto* cert = app.add_subcommand("certify", "Randomized equivariance certification of the encoder");
  add_common(cert, common);
  std::string checkpoint, fault_layer;
  CertifyOptions copt;
  cert->add_option("--checkpoint", checkpoint, "Encoder or model checkpoint (default: fresh weights)");
  cert->add_option("--trials", copt.trials, "Random (σ, R) trials")->check(CLI::PositiveNumber);
  cert->add_option("--points", copt.points, "Points per random fragment")->check(CLI::PositiveNumber);
  cert->add_option("--fault-layer", fault_layer, "Inject a vector bias into this layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    std::vector<std::string> extra;
    if (gen->parsed()) {
      maybe(extra, "dataset.objects", objects);
      maybe(extra, "dataset.fragments", fragments);
      cmd_generate(resolve(common, extra), std::cout);
    } else if (seg->parsed()) {
      maybe(extra, "pretrain.epochs", epochs);
      if (resume) extra.push_back("pretrain.resume=true");
      cmd_pretrain_seg(resolve(common, extra), std::cout);
    } else if (train->parsed()) {
      maybe(extra, "flow.steps", steps);
      maybe(extra, "overlap.alpha", alpha);
      cmd_train(resolve(common, extra), std::cout);
    } else if (asmb->parsed()) {
      maybe(extra, "inference.mode", mode);
      maybe(extra, "inference.steps", steps);
      const Config cfg = resolve(common, extra);
      const std::filesystem::path out = out_dir.empty() ? cfg.workdir / "assembled" : std::filesystem::path(out_dir);
      for (const auto& m : manifests) cmd_assemble(cfg, m, out, std::cout);
    } else if (eval->parsed()) {
      maybe(extra, "inference.mode", mode);
      cmd_eval(resolve(common, extra), std::cout);
    } else if (cert->parsed()) {
      if (!fault_layer.empty()) extra.push_back("model.fault_layer=" + nlohmann::json(fault_layer).dump());
      const Config cfg = resolve(common, extra);
      copt.seed = cfg.seed;
      const auto run = cmd_certify(cfg, checkpoint, copt, std::cout);
      if (!run.passed()) {
        const auto& bad = run.float64.passed() ? run.float32 : run.float64;
        std::cerr << "certification failed at layer: " << bad.first_failure() << "\n";
        return certification_failure;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const tensor::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return data_error;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return divergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return generic;
  }
  return ok;
}
