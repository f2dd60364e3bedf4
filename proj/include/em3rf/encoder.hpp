// Multimodal fragment encoder: a vector-neuron geometry branch, a color
// transformer, their channel-wise fusion, positional enrichment and the
// fracture-boundary segmentation head.
//
// Geometry features have shape [N, C_geo, 3] and rotate with the input.
// Color features have shape [N, C_rgb, 3] and ignore rotations entirely.

#ifndef EM3RF_ENCODER_HPP
#define EM3RF_ENCODER_HPP

#include "em3rf/fragments.hpp"
#include "em3rf/tensor/ops.hpp"
#include "em3rf/tensor/parameters.hpp"

#include <functional>
#include <string>
#include <vector>

namespace em3rf {

enum class GeoBackbone { vector_neuron, mlp };

GeoBackbone parse_backbone(const std::string& name);
std::string backbone_name(GeoBackbone b);

struct EncoderConfig {
  int c_geo = 64;
  int c_rgb = 32;
  int geo_blocks = 4;
  int rgb_blocks = 2;
  /// Fourier bands L of the positional encoding.
  int bands = 6;
  /// Output width of the f_shape projection.
  int shape_dim = 128;
  /// Vector channels projected for the Gram readout.
  int gram_channels = 8;
  int seg_hidden = 64;
  /// Negative-halfspace slope of the vector nonlinearity; -1 reflects.
  double vn_slope = -1.0;
  GeoBackbone backbone = GeoBackbone::vector_neuron;
  /// Name of a geometry layer that gets a constant bias on its vector
  /// output. Only used to exercise the equivariance certifier.
  std::string fault_layer;
};

// ---------------------------------------------------------------------------
// Layer primitives, exposed for testing and certification.

/// out[n, o, :] = sum_c w[o, c] x[n, c, :]
template <typename Scalar>
tensor::Tensor<Scalar> vn_linear(const tensor::Tensor<Scalar>& x, const tensor::Tensor<Scalar>& w);

/// Direction-split rectification. d = vn_linear(x, w_dir); the component of
/// each vector along d is kept when positive and multiplied by `slope` when
/// negative.
template <typename Scalar>
tensor::Tensor<Scalar> vn_nonlinearity(const tensor::Tensor<Scalar>& x, const tensor::Tensor<Scalar>& w_dir,
                                       Scalar slope = Scalar(-1));

/// Divides each point's vectors by their root-mean-square norm.
template <typename Scalar>
tensor::Tensor<Scalar> vn_normalize(const tensor::Tensor<Scalar>& x);

/// Single-head attention over the N points. Logits are the inner products
/// of query and key vectors summed over channels and the spatial axis.
template <typename Scalar>
tensor::Tensor<Scalar> vn_attention(const tensor::Tensor<Scalar>& x, const tensor::Tensor<Scalar>& wq,
                                    const tensor::Tensor<Scalar>& wk, const tensor::Tensor<Scalar>& wv);

/// Attention logits of vn_attention, [N, N].
template <typename Scalar>
tensor::Tensor<Scalar> vn_attention_logits(const tensor::Tensor<Scalar>& x, const tensor::Tensor<Scalar>& wq,
                                           const tensor::Tensor<Scalar>& wk);

/// Pairwise inner products of the vectors of each point: [N, C, 3] -> [N, C*C].
template <typename Scalar>
tensor::Tensor<Scalar> gram_readout(const tensor::Tensor<Scalar>& x);

/// Channel concatenation of geometry and color blocks.
template <typename Scalar>
tensor::Tensor<Scalar> fuse(const tensor::Tensor<Scalar>& geo, const tensor::Tensor<Scalar>& rgb);

/// sin/cos of 2^l * v for l < bands, laid out per input column as
/// [sin f0, cos f0, sin f1, cos f1, ...]. Input [N, D] -> [N, 2 * bands * D].
template <typename Scalar>
std::vector<Scalar> positional_encoding(const std::vector<Scalar>& values, tensor::Index columns, int bands);

// ---------------------------------------------------------------------------

template <typename Scalar>
class FragmentEncoder {
 public:
  using T = tensor::Tensor<Scalar>;

  struct Layer {
    std::string name;
    std::function<T(const T&)> apply;
  };

  /// Registers (or reuses) the "encoder/*" parameters in `store`.
  FragmentEncoder(const EncoderConfig& config, tensor::ParameterStore<Scalar>& store, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  /// [N, 2, 3]: positions then normals.
  static T geo_input(const Fragment& f);
  static T color_input(const Fragment& f);

  /// The geometry branch as a sequence of named layers; geo_encode is their composition.
  const std::vector<Layer>& geo_layers() const { return layers_; }

  T geo_encode(const T& input) const;
  T geo_encode(const Fragment& f) const { return geo_encode(geo_input(f)); }

  T rgb_encode(const T& colors) const;
  T rgb_encode(const Fragment& f) const { return rgb_encode(color_input(f)); }

  /// Φ_enc = [Φ_geo ∥ Φ_rgb], shape [N, C_geo + C_rgb, 3].
  T encode(const Fragment& f) const { return fuse(geo_encode(f), rgb_encode(f)); }

  /// Flattened embedding with PE(xyz), PE(n), PE(s) appended; [N, 3C + 12L + 2L].
  T enrich_features(const T& h, const Fragment& f) const;
  /// f_shape applied to enrich_features; [N, shape_dim].
  T positional_enrich(const T& h, const Fragment& f) const;

  /// Rotation-invariant per-point features: Gram of projected geometry
  /// channels followed by the flattened color block.
  T invariant_features(const T& h) const;
  T segment_logits(const T& h) const;
  T segment_boundary(const T& h) const { return tensor::sigmoid(segment_logits(h)); }

  tensor::Index enrich_width() const;
  tensor::Index invariant_width() const;
  /// Trainable parameters of the geometry branch alone.
  tensor::Index geo_parameter_count() const;

 private:
  void build_vector_neuron(tensor::ParameterStore<Scalar>& store, std::mt19937_64& rng);
  void build_mlp(tensor::ParameterStore<Scalar>& store, std::mt19937_64& rng);

  EncoderConfig config_;
  std::vector<Layer> layers_;
  std::vector<T> geo_params_;

  struct RgbBlock {
    T ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  T rgb_embed_w_, rgb_embed_b_;
  std::vector<RgbBlock> rgb_blocks_;
  T rgb_expand_a_, rgb_expand_b_;

  T seg_proj_, seg_w1_, seg_b1_, seg_w2_, seg_b2_;
  T shape_w_, shape_b_;
};

/// Parameter count of the vector-neuron geometry branch for a config.
tensor::Index vector_neuron_parameter_count(const EncoderConfig& config);
/// Hidden width of the MLP backbone whose parameter count is closest to the
/// vector-neuron branch.
int matched_mlp_hidden(const EncoderConfig& config);

extern template class FragmentEncoder<float>;
extern template class FragmentEncoder<double>;

}  // namespace em3rf

#endif  // EM3RF_ENCODER_HPP
