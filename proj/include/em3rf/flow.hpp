// Conditional flow matching on SE(3): geodesic training pairs, the
// velocity network over fragment tokens, the flow objective and Euler
// integration on the manifold.
//
// Rotational velocities are body-frame (right-trivialized): R <- R exp(dt v_R).
// Translational velocities are world-frame: β <- β + dt v_β.

#ifndef EM3RF_FLOW_HPP
#define EM3RF_FLOW_HPP

#include "em3rf/encoder.hpp"
#include "em3rf/fragments.hpp"

#include <functional>
#include <optional>
#include <stdexcept>

namespace em3rf {

using Tangent = TangentVector<double>;

/// Non-finite values during training or integration.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FlowSample {
  Pose g0, g1, gt;
  double t = 0;
  Tangent target;
};

/// Interpolant and target velocity for a given start pose. Throws std::domain_error unless 0 <= t < 1.
FlowSample make_flow_sample(const Pose& g0, const Pose& g1, double t);

/// As above with g0 drawn from the initial distribution (Haar rotation, standard normal translation).
template <typename Rng>
FlowSample make_flow_sample(const Pose& g1, double t, Rng& rng) {
  if (!(t >= 0 && t < 1)) throw std::domain_error("make_flow_sample: t must lie in [0, 1)");
  return make_flow_sample(sample_initial_pose<double>(rng), g1, t);
}

/// Rows of [v_R, v_β] for a list of tangent vectors, shape [M, 6].
template <typename Scalar>
tensor::Tensor<Scalar> tangent_rows(const std::vector<Tangent>& v);
std::vector<Tangent> tangents_from_rows(const tensor::Tensor<double>& rows);

/// mean_i ‖v_β − target_β‖² + λ ‖v_R − target_R‖² over the rows of [M, 6] tensors.
template <typename Scalar>
tensor::Tensor<Scalar> flow_loss(const tensor::Tensor<Scalar>& pred, const tensor::Tensor<Scalar>& target, double lambda);

/// Batch form on plain vectors: per-object means averaged over objects.
double flow_loss(const std::vector<std::vector<Tangent>>& pred, const std::vector<std::vector<FlowSample>>& samples,
                 double lambda);

/// Differentiable rotation exponential: [M, 3] axis-angle rows -> [M, 3, 3] matrices.
template <typename Scalar>
tensor::Tensor<Scalar> so3_exp_rows(const tensor::Tensor<Scalar>& omega);

// ---------------------------------------------------------------------------

enum class VelocityArch { equivariant, flat };
enum class VelocityParam { direct, endpoint };

VelocityArch parse_velocity_arch(const std::string& name);
VelocityParam parse_velocity_param(const std::string& name);
std::string velocity_arch_name(VelocityArch a);
std::string velocity_param_name(VelocityParam p);

struct FlowConfig {
  VelocityArch arch = VelocityArch::equivariant;
  /// endpoint: the heads predict the remaining displacement r and the
  /// velocity is r / (1 − t); direct: the heads predict the velocity.
  VelocityParam param = VelocityParam::endpoint;
  int pool_channels = 8;
  int pool_gates = 4;
  int vector_width = 32;
  int hidden = 64;
  int blocks = 3;
  int cross_channels = 8;
  double lambda = 1.0;
  double t_cap = 0.999;
};

/// Frozen encoder output for one fragment in its own body frame.
template <typename Scalar>
struct FragmentFeatures {
  /// [N, C_geo + 2, 3]: geometry channels, positions, normals.
  tensor::Tensor<Scalar> vectors;
  /// [N, 3 C_rgb + 1]: flattened color block and boundary probability.
  tensor::Tensor<Scalar> scalars;
  /// [N, enrich width]; only filled for the flat architecture.
  tensor::Tensor<Scalar> enrich;
  double scale = 1;
};

/// Runs the (frozen) encoder on a fragment.
template <typename Scalar>
FragmentFeatures<Scalar> extract_features(const FragmentEncoder<Scalar>& encoder, const Fragment& f, bool with_enrich);

template <typename Scalar>
class VelocityNet {
 public:
  using T = tensor::Tensor<Scalar>;

  /// Registers the "flow/*" parameters. `encoder` fixes the feature widths.
  VelocityNet(const FlowConfig& config, const EncoderConfig& encoder, tensor::ParameterStore<Scalar>& store,
              std::uint64_t seed);

  const FlowConfig& config() const { return config_; }

  /// [M, 6] velocities (body-frame rotational, world-frame translational)
  /// for all fragments of one object at time t. Throws on an empty object.
  T forward(const std::vector<const FragmentFeatures<Scalar>*>& fragments, const std::vector<Pose>& poses, double t,
            std::size_t anchor) const;

 private:
  T pooled_vectors_and_scalars(const FragmentFeatures<Scalar>& f, T& scalars_out) const;
  T forward_equivariant(const std::vector<const FragmentFeatures<Scalar>*>& fragments, const std::vector<Pose>& poses,
                        double t, std::size_t anchor) const;
  T forward_flat(const std::vector<const FragmentFeatures<Scalar>*>& fragments, const std::vector<Pose>& poses,
                 double t, std::size_t anchor) const;

  FlowConfig config_;
  EncoderConfig encoder_;
  int bands_;

  // Pooling.
  T pool_w_, gram_w_, point_w1_, point_b1_, gate_w_, gate_b_;
  // Token lift.
  T lift_vec_, lift_s_w_, lift_s_b_, anchor_embed_;

  struct Block {
    T q_vec, k_vec, v_vec, q_s, k_s, v_s, o_s;
    T read_vec, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    T upd_vec, upd_gate_w, upd_gate_b;
    T ln_g, ln_b, ln2_g, ln2_b;
  };
  std::vector<Block> blocks_;
  T head_ln_g_, head_ln_b_, head_trans_w_, head_trans_b_, head_rot_w_, head_rot_b_, head_cross_w_, head_cross_b_, cross_u_, cross_v_;
  T flat_head_w_, flat_head_b_, shape_w_, shape_b_;

  static tensor::Index flat_enrich_width(const EncoderConfig& e);
};

/// One tangent vector per fragment from the network.
template <typename Scalar>
std::vector<Tangent> predict_velocity(const VelocityNet<Scalar>& net, const std::vector<Pose>& poses, double t,
                                      const std::vector<const FragmentFeatures<Scalar>*>& tokens, std::size_t anchor);

// ---------------------------------------------------------------------------

enum class StartMode { sample_p0, identity_start };
StartMode parse_start_mode(const std::string& name);
std::string start_mode_name(StartMode m);

/// Velocity field evaluated on all fragments at once.
using VelocityField = std::function<std::vector<Tangent>(const std::vector<Pose>& poses, double t)>;

struct IntegrateOptions {
  int steps = 100;
  /// Fragment kept fixed (the anchor), if any.
  std::optional<std::size_t> frozen;
  double reproject_tolerance = 1e-5;
};

/// Starting poses: identity for the frozen fragment and, in identity_start
/// mode, for every fragment; otherwise draws from the initial distribution.
template <typename Rng>
std::vector<Pose> initial_poses(std::size_t count, StartMode mode, std::optional<std::size_t> frozen, Rng& rng) {
  std::vector<Pose> g(count, Pose::identity());
  if (mode == StartMode::sample_p0)
    for (std::size_t i = 0; i < count; ++i)
      if (!frozen || *frozen != i) g[i] = sample_initial_pose<double>(rng);
  return g;
}

/// Explicit Euler with dt = 1/steps. Throws DivergenceError naming the step on a non-finite velocity.
std::vector<Pose> integrate(const VelocityField& field, std::vector<Pose> poses, const IntegrateOptions& options);

/// Field of the conditional targets towards fixed end poses.
VelocityField exact_target_field(const std::vector<Pose>& targets);

/// Largest fragment by point count; ties broken by a rotation-invariant fingerprint of the points.
std::size_t select_anchor(const std::vector<Fragment>& fragments);

/// g_anchor⁻¹ · g_i for every pose.
std::vector<Pose> relative_to_anchor(const std::vector<Pose>& poses, std::size_t anchor);

extern template class VelocityNet<float>;
extern template class VelocityNet<double>;

}  // namespace em3rf

#endif  // EM3RF_FLOW_HPP
