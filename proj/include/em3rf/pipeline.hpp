// Command implementations shared by the CLI and the acceptance run.
#ifndef EM3RF_PIPELINE_HPP
#define EM3RF_PIPELINE_HPP

#include "em3rf/certify.hpp"
#include "em3rf/config.hpp"

#include <iosfwd>

namespace em3rf {

/// Seed of object k in a generated set.
std::uint64_t object_seed(std::uint64_t seed, std::size_t k);

/// Object k of the synthetic set: fractured, boundary-labeled and perturbed.
UnassembledObject make_object(const DatasetConfig& spec, std::uint64_t seed, std::size_t k);

/// Writes obj_XXXX.json manifests and fragment PLYs; returns the manifest paths.
std::vector<std::filesystem::path> cmd_generate(const Config& cfg, std::ostream& log);

struct DatasetSplit {
  std::vector<UnassembledObject> train;
  std::vector<UnassembledObject> holdout;
  std::vector<std::string> holdout_names;
};

/// Reads the dataset directory; the last `holdout` manifests by name are held out. Throws DataError.
DatasetSplit load_split(const Config& cfg);

/// Writes the "encoder/*" checkpoint and seg_log.csv (epoch,loss,auc,wall_ms) to the workdir.
std::vector<SegEpoch> cmd_pretrain_seg(const Config& cfg, std::ostream& log);

/// Loads the encoder checkpoint when present, trains the velocity network and writes model.ckpt
/// and flow_log.csv.
std::vector<FlowLogRow> cmd_train(const Config& cfg, std::ostream& log);

/// Loads model.ckpt built from the config's model section. Throws DataError when it is missing.
std::unique_ptr<Model> load_trained_model(const Config& cfg);

/// Assembles one manifest. Writes <out>/<name>_fragK.ply placed in the anchor frame and
/// <out>/<name>_poses.json.
Assembly cmd_assemble(const Config& cfg, const std::filesystem::path& manifest, const std::filesystem::path& out,
                      std::ostream& log);

struct EvalResult {
  std::vector<AssemblyReport> reports;
  AssemblyReport summary;
  /// Mean pairwise soft IoU of the assembled fragments.
  double mean_iou = 0;
};

/// Assembles and scores objects with ground truth.
EvalResult evaluate_objects(const Model& model, const std::vector<UnassembledObject>& objects,
                            const std::vector<std::string>& names, const Config& cfg);

/// Scores the held-out split and writes report.csv and report.json to the workdir.
EvalResult cmd_eval(const Config& cfg, std::ostream& log);

struct CertifyRun {
  CertificationReport float32;
  CertificationReport float64;
  bool passed() const { return float32.passed() && float64.passed(); }
};

/// Certifies the encoder in both precisions; weights come from `checkpoint` when it is non-empty.
CertifyRun cmd_certify(const Config& cfg, const std::filesystem::path& checkpoint, const CertifyOptions& options,
                       std::ostream& log);

}  // namespace em3rf

#endif  // EM3RF_PIPELINE_HPP
