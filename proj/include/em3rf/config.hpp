// Run configuration: one JSON document, unknown keys rejected.
#ifndef EM3RF_CONFIG_HPP
#define EM3RF_CONFIG_HPP

#include "em3rf/metrics.hpp"
#include "em3rf/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace em3rf {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::filesystem::path dir = "data";
  /// Shapes cycled over the generated objects.
  std::vector<std::string> shapes{"cube", "sphere"};
  int objects = 50;
  int fragments = 2;
  Eigen::Index points = 5000;
  double scale = 1.0;
  /// Boundary labeling threshold in assembled coordinates.
  double tau = 0.4;
  /// The last `holdout` objects (by name) are reserved for assemble/eval.
  int holdout = 10;
};

struct InferenceConfig {
  int steps = 100;
  StartMode mode = StartMode::sample_p0;
};

struct Config {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::filesystem::path workdir = "run";
  DatasetConfig dataset;
  ModelConfig model;
  SegPretrainConfig pretrain;
  /// Start pretraining from an existing encoder checkpoint and append to its log.
  bool pretrain_resume = false;
  /// Training settings; overlap and optimizer keys land here as well.
  FlowTrainConfig train;
  InferenceConfig inference;
  MetricsConfig metrics;

  std::filesystem::path encoder_checkpoint() const { return workdir / "encoder.ckpt"; }
  std::filesystem::path model_checkpoint() const { return workdir / "model.ckpt"; }
};

/// Defaults, sections: seed, jobs, workdir, dataset, model, flow, overlap, optimizer, pretrain, inference, metrics.
nlohmann::json config_to_json(const Config& cfg);
/// Starts from defaults; every key present must be known and well-typed, else ConfigError.
Config config_from_json(const nlohmann::json& doc);
Config load_config(const std::filesystem::path& path);

/// "a.b.c=value" sets a nested key. The value is parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// EM3RF_SEED, when set, replaces the seed. A malformed value is a ConfigError.
void apply_environment(Config& cfg);

}  // namespace em3rf

#endif  // EM3RF_CONFIG_HPP
