// Model bundle, boundary-segmentation pretraining, flow training and
// inference-time assembly.
#ifndef EM3RF_TRAIN_HPP
#define EM3RF_TRAIN_HPP

#include "em3rf/flow.hpp"
#include "em3rf/overlap.hpp"
#include "em3rf/tensor/checkpoint.hpp"

#include <filesystem>
#include <functional>
#include <memory>

namespace em3rf {

struct ModelConfig {
  EncoderConfig encoder;
  FlowConfig flow;
};

/// Encoder and velocity network with their parameter stores ("encoder/*" and "flow/*").
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }

  tensor::ParameterStore<double> encoder_store;
  tensor::ParameterStore<double> flow_store;
  FragmentEncoder<double> encoder;
  VelocityNet<double> net;

  std::vector<tensor::NamedArray> export_parameters() const;
  /// Loads every matching entry; returns how many parameters were found.
  std::size_t import_parameters(const std::vector<tensor::NamedArray>& entries);
  void save(const std::filesystem::path& path) const;
  std::size_t load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
};

/// Area under the ROC curve with ties counted half. Throws if either class is empty.
double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// ---------------------------------------------------------------------------

struct SegPretrainConfig {
  int epochs = 12;
  /// Points drawn per fragment and step.
  tensor::Index points = 256;
  /// FPS points per fragment used for the AUC.
  tensor::Index eval_points = 384;
  int batch = 4;
  double lr = 1e-3;
  double clip = 5.0;
  std::uint64_t seed = 0;
};

struct SegEpoch {
  int epoch = 0;
  double loss = 0;
  double auc = 0;
  double wall_ms = 0;
};

/// Boundary probability AUC over every fragment of `objects` (FPS subsets).
double segmentation_auc(const FragmentEncoder<double>& encoder, const std::vector<UnassembledObject>& objects,
                        tensor::Index points, std::uint64_t seed);

/// Class-balanced binary cross-entropy on the boundary labels, optimizing the encoder store.
/// The returned trace starts with epoch 0 (before any update). Throws DataError on missing labels
/// and DivergenceError on a non-finite loss.
std::vector<SegEpoch> pretrain_segmentation(Model& model, const std::vector<UnassembledObject>& train,
                                            const std::vector<UnassembledObject>& eval, const SegPretrainConfig& cfg,
                                            const std::function<void(const SegEpoch&)>& on_epoch = {});

// ---------------------------------------------------------------------------

struct FlowTrainConfig {
  int steps = 6000;
  int batch = 8;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip = 1.0;
  /// Cosine decay from lr to lr · final_lr_fraction over the run; 1 keeps lr constant.
  double final_lr_fraction = 0.05;
  /// Weight of the no-overlap term.
  double alpha = 0.3;
  /// The flow loss of a sample is weighted by (1 − t)^time_weight_power: 0 is the plain
  /// velocity loss, 2 measures the remaining displacement instead of the velocity.
  double time_weight_power = 0;
  OverlapConfig overlap;
  tensor::Index encoder_points = 256;
  tensor::Index overlap_points = 128;
  /// Randomly re-oriented copies of each object with precomputed features.
  int views = 8;
  /// Views after the first also permute and invert color channels, the same way for every fragment.
  bool color_augment = true;
  int log_every = 10;
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// One orientation of an object: frozen features, overlap samples and
/// targets relative to the anchor.
struct TrainingView {
  std::vector<FragmentFeatures<double>> features;
  std::vector<Points> overlap_points;
  std::vector<Pose> targets;
  std::size_t anchor = 0;
};

struct PreparedObject {
  std::vector<TrainingView> views;
};

TrainingView prepare_view(const Model& model, const UnassembledObject& obj, tensor::Index encoder_points,
                          tensor::Index overlap_points, std::uint64_t seed, bool color_augment = false);

std::vector<PreparedObject> prepare_dataset(const Model& model, const std::vector<UnassembledObject>& objects,
                                            const FlowTrainConfig& cfg);

struct FlowLogRow {
  long step = 0;
  double flow = 0;
  double overlap = 0;
  double total = 0;
  double wall_ms = 0;
};

/// Appends rows as CSV with the header step,L_flow,L_overlap,L_total,wall_ms.
class FlowLogWriter {
 public:
  explicit FlowLogWriter(const std::filesystem::path& path);
  void write(const FlowLogRow& row);

 private:
  std::filesystem::path path_;
};

/// Extrapolated end poses ĝ¹ applied to body-frame points: R̂ = Rᵗ exp((1 − t) v_R), β̂ = βᵗ + (1 − t) v_β.
tensor::Tensor<double> extrapolated_points(const tensor::Tensor<double>& velocity_row, const Pose& gt, double t,
                                           const Points& body_points);

/// Minimizes flow_loss + alpha · no_overlap_loss(ĝ¹) over random objects, views, times and
/// start poses (anchor starts at the identity). Logs every `log_every` steps and the last one.
std::vector<FlowLogRow> train_flow(Model& model, const std::vector<PreparedObject>& data, const FlowTrainConfig& cfg,
                                   const std::function<void(const FlowLogRow&)>& on_log = {});

// ---------------------------------------------------------------------------

struct AssembleOptions {
  int steps = 100;
  StartMode mode = StartMode::sample_p0;
  tensor::Index encoder_points = 256;
  std::uint64_t seed = 0;
};

struct Assembly {
  std::size_t anchor = 0;
  /// Body frame to the anchor frame; the anchor's pose is the identity.
  std::vector<Pose> poses;
};

Assembly assemble(const Model& model, const UnassembledObject& obj, const AssembleOptions& options);

/// Predicted poses expressed in the ground-truth frame through the anchor's ground-truth pose.
std::vector<Pose> align_to_ground_truth(const Assembly& assembly, const std::vector<Pose>& gt_poses);

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace em3rf

#endif  // EM3RF_TRAIN_HPP
