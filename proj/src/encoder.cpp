#include "em3rf/encoder.hpp"

#include <cmath>

namespace em3rf {

using tensor::Index;
using tensor::Shape;
namespace ts = tensor;

GeoBackbone parse_backbone(const std::string& name) {
  if (name == "vector_neuron" || name == "vn") return GeoBackbone::vector_neuron;
  if (name == "mlp") return GeoBackbone::mlp;
  throw std::invalid_argument("unknown geometry backbone '" + name + "' (expected vector_neuron or mlp)");
}

std::string backbone_name(GeoBackbone b) { return b == GeoBackbone::mlp ? "mlp" : "vector_neuron"; }

template <typename Scalar>
ts::Tensor<Scalar> vn_linear(const ts::Tensor<Scalar>& x, const ts::Tensor<Scalar>& w) {
  return ts::channel_mix(x, w);
}

template <typename Scalar>
ts::Tensor<Scalar> vn_nonlinearity(const ts::Tensor<Scalar>& x, const ts::Tensor<Scalar>& w_dir, Scalar slope) {
  using namespace ts;
  const auto d = channel_mix(x, w_dir);
  const auto dot = sum_axis(mul(x, d), 2);
  const auto dd = add_scalar(sum_axis(square(d), 2), Scalar(1e-6));
  const auto negative = neg(relu(neg(dot)));
  const auto coef = scale(div(negative, dd), slope - Scalar(1));
  return add(x, scale_last(d, coef));
}

template <typename Scalar>
ts::Tensor<Scalar> vn_normalize(const ts::Tensor<Scalar>& x) {
  using namespace ts;
  const Index n = x.dim(0), c = x.dim(1);
  const auto ms = mean_axis(sum_axis(square(x), 2), 1);
  const auto inv = div(Tensor<Scalar>::filled({n}, Scalar(1)), sqrt(add_scalar(ms, Scalar(1e-6))));
  return reshape(scale_last(reshape(x, {n, c * 3}), inv), {n, c, 3});
}

template <typename Scalar>
ts::Tensor<Scalar> vn_attention_logits(const ts::Tensor<Scalar>& x, const ts::Tensor<Scalar>& wq,
                                       const ts::Tensor<Scalar>& wk) {
  using namespace ts;
  const Index n = x.dim(0), c = wq.dim(0);
  const auto q = reshape(channel_mix(x, wq), {n, 3 * c});
  const auto k = reshape(channel_mix(x, wk), {n, 3 * c});
  return scale(matmul_bt(q, k), Scalar(1.0 / std::sqrt(double(3 * c))));
}

template <typename Scalar>
ts::Tensor<Scalar> vn_attention(const ts::Tensor<Scalar>& x, const ts::Tensor<Scalar>& wq,
                                const ts::Tensor<Scalar>& wk, const ts::Tensor<Scalar>& wv) {
  using namespace ts;
  const Index n = x.dim(0), c = wv.dim(0);
  const auto a = softmax(vn_attention_logits(x, wq, wk));
  const auto v = reshape(channel_mix(x, wv), {n, 3 * c});
  return reshape(matmul(a, v), {n, c, 3});
}

template <typename Scalar>
ts::Tensor<Scalar> gram_readout(const ts::Tensor<Scalar>& x) {
  using namespace ts;
  const Index n = x.dim(0), c = x.dim(1);
  return reshape(bmm(x, permute(x, {0, 2, 1})), {n, c * c});
}

template <typename Scalar>
ts::Tensor<Scalar> fuse(const ts::Tensor<Scalar>& geo, const ts::Tensor<Scalar>& rgb) {
  if (geo.rank() != 3 || rgb.rank() != 3 || geo.dim(0) != rgb.dim(0) || geo.dim(2) != 3 || rgb.dim(2) != 3) {
    throw ts::ShapeError("fuse: geometry " + ts::to_string(geo.shape()) + " and color " +
                         ts::to_string(rgb.shape()) + " blocks do not line up");
  }
  if (geo.dim(1) == 0) return rgb;
  if (rgb.dim(1) == 0) return geo;
  return ts::concat<Scalar>({geo, rgb}, 1);
}

template <typename Scalar>
std::vector<Scalar> positional_encoding(const std::vector<Scalar>& values, Index columns, int bands) {
  const Index rows = static_cast<Index>(values.size()) / columns;
  std::vector<Scalar> out(static_cast<std::size_t>(rows * columns * 2 * bands));
  std::size_t k = 0;
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < columns; ++c) {
      const double v = values[static_cast<std::size_t>(r * columns + c)];
      for (int l = 0; l < bands; ++l) {
        const double f = std::ldexp(1.0, l);
        out[k++] = Scalar(std::sin(f * v));
        out[k++] = Scalar(std::cos(f * v));
      }
    }
  return out;
}

// ---------------------------------------------------------------------------

Index vector_neuron_parameter_count(const EncoderConfig& c) {
  const Index g = c.c_geo;
  return 2 * g + Index(c.geo_blocks) * 6 * g * g;
}

namespace {

Index mlp_parameter_count(const EncoderConfig& c, Index h) {
  const Index out = 3 * Index(c.c_geo);
  return 6 * h + h + h * h + h + h * out + out;
}

}  // namespace

int matched_mlp_hidden(const EncoderConfig& c) {
  const Index target = vector_neuron_parameter_count(c);
  Index best = 1;
  for (Index h = 1; h < 4096; ++h) {
    if (std::abs(double(mlp_parameter_count(c, h) - target)) < std::abs(double(mlp_parameter_count(c, best) - target)))
      best = h;
  }
  return static_cast<int>(best);
}

template <typename Scalar>
FragmentEncoder<Scalar>::FragmentEncoder(const EncoderConfig& config, ts::ParameterStore<Scalar>& store,
                                         std::uint64_t seed)
    : config_(config) {
  if (config.c_geo < 0 || config.c_rgb < 0 || config.geo_blocks < 0 || config.rgb_blocks < 0 || config.bands < 1) {
    throw std::invalid_argument("encoder: widths and block counts must be non-negative, bands >= 1");
  }
  std::mt19937_64 rng(seed);
  if (config.backbone == GeoBackbone::vector_neuron) {
    build_vector_neuron(store, rng);
  } else {
    build_mlp(store, rng);
  }

  const Index cr = config.c_rgb;
  rgb_embed_w_ = store.add_glorot("encoder/rgb/embed/w", {cr, 3}, rng);
  rgb_embed_b_ = store.add_constant("encoder/rgb/embed/b", {cr}, Scalar(0));
  for (int b = 0; b < config.rgb_blocks; ++b) {
    const std::string p = "encoder/rgb/block" + std::to_string(b) + "/";
    RgbBlock blk;
    blk.ln1_g = store.add_constant(p + "ln1/g", {cr}, Scalar(1));
    blk.ln1_b = store.add_constant(p + "ln1/b", {cr}, Scalar(0));
    blk.wq = store.add_glorot(p + "wq", {cr, cr}, rng);
    blk.wk = store.add_glorot(p + "wk", {cr, cr}, rng);
    blk.wv = store.add_glorot(p + "wv", {cr, cr}, rng);
    blk.wo = store.add_glorot(p + "wo", {cr, cr}, rng);
    blk.ln2_g = store.add_constant(p + "ln2/g", {cr}, Scalar(1));
    blk.ln2_b = store.add_constant(p + "ln2/b", {cr}, Scalar(0));
    blk.w1 = store.add_glorot(p + "w1", {2 * cr, cr}, rng);
    blk.b1 = store.add_constant(p + "b1", {2 * cr}, Scalar(0));
    blk.w2 = store.add_glorot(p + "w2", {cr, 2 * cr}, rng);
    blk.b2 = store.add_constant(p + "b2", {cr}, Scalar(0));
    rgb_blocks_.push_back(blk);
  }
  rgb_expand_a_ = store.add_glorot("encoder/rgb/expand/a", {cr, 3}, rng);
  rgb_expand_b_ = store.add_constant("encoder/rgb/expand/b", {cr * 3}, Scalar(0));

  const Index g = config.gram_channels;
  seg_proj_ = store.add_glorot("encoder/seg/proj", {g, Index(config.c_geo)}, rng);
  seg_w1_ = store.add_glorot("encoder/seg/w1", {Index(config.seg_hidden), invariant_width()}, rng);
  seg_b1_ = store.add_constant("encoder/seg/b1", {Index(config.seg_hidden)}, Scalar(0));
  seg_w2_ = store.add_glorot("encoder/seg/w2", {1, Index(config.seg_hidden)}, rng);
  seg_b2_ = store.add_constant("encoder/seg/b2", {1}, Scalar(0));

  shape_w_ = store.add_glorot("encoder/shape/w", {Index(config.shape_dim), enrich_width()}, rng);
  shape_b_ = store.add_constant("encoder/shape/b", {Index(config.shape_dim)}, Scalar(0));
}

namespace {

template <typename Scalar>
ts::Tensor<Scalar> inject_fault(const std::string& fault, const std::string& name, const ts::Tensor<Scalar>& out) {
  if (fault != name) return out;
  // A constant offset along the x axis of every vector channel.
  std::vector<Scalar> bias(static_cast<std::size_t>(out.size()), Scalar(0));
  for (std::size_t i = 0; i < bias.size(); i += 3) bias[i] = Scalar(0.1);
  return ts::add(out, ts::Tensor<Scalar>::from_data(out.shape(), std::move(bias)));
}

}  // namespace

template <typename Scalar>
void FragmentEncoder<Scalar>::build_vector_neuron(ts::ParameterStore<Scalar>& store, std::mt19937_64& rng) {
  const Index c = config_.c_geo;
  const Scalar slope = Scalar(config_.vn_slope);
  T lift = store.add_glorot("encoder/geo/lift", {c, 2}, rng);
  geo_params_.push_back(lift);
  const std::string fault = config_.fault_layer;
  layers_.push_back({"geo/lift", [fault, lift](const T& x) { return inject_fault(fault, "geo/lift", vn_linear(x, lift)); }});

  for (int b = 0; b < config_.geo_blocks; ++b) {
    const std::string p = "encoder/geo/block" + std::to_string(b) + "/";
    const std::string name = "geo/block" + std::to_string(b);
    T wq = store.add_glorot(p + "wq", {c, c}, rng);
    T wk = store.add_glorot(p + "wk", {c, c}, rng);
    T wv = store.add_glorot(p + "wv", {c, c}, rng);
    T w1 = store.add_glorot(p + "w1", {c, c}, rng);
    T wd = store.add_glorot(p + "wdir", {c, c}, rng);
    T w2 = store.add_glorot(p + "w2", {c, c}, rng);
    for (const T& t : {wq, wk, wv, w1, wd, w2}) geo_params_.push_back(t);

    layers_.push_back({name + "/attention", [fault, wq, wk, wv, name](const T& x) {
                         return inject_fault(fault, name + "/attention", ts::add(x, vn_attention(vn_normalize(x), wq, wk, wv)));
                       }});
    layers_.push_back({name + "/mlp", [fault, w1, wd, w2, slope, name](const T& x) {
                         const T h = vn_nonlinearity(vn_linear(vn_normalize(x), w1), wd, slope);
                         return inject_fault(fault, name + "/mlp", ts::add(x, vn_linear(h, w2)));
                       }});
  }
}

template <typename Scalar>
void FragmentEncoder<Scalar>::build_mlp(ts::ParameterStore<Scalar>& store, std::mt19937_64& rng) {
  const Index c = config_.c_geo;
  const Index h = matched_mlp_hidden(config_);
  T w1 = store.add_glorot("encoder/geo_mlp/w1", {h, 6}, rng);
  T b1 = store.add_constant("encoder/geo_mlp/b1", {h}, Scalar(0));
  T w2 = store.add_glorot("encoder/geo_mlp/w2", {h, h}, rng);
  T b2 = store.add_constant("encoder/geo_mlp/b2", {h}, Scalar(0));
  T w3 = store.add_glorot("encoder/geo_mlp/w3", {3 * c, h}, rng);
  T b3 = store.add_constant("encoder/geo_mlp/b3", {3 * c}, Scalar(0));
  geo_params_ = {w1, b1, w2, b2, w3, b3};
  const std::string fault = config_.fault_layer;
  layers_.push_back({"geo_mlp", [fault, w1, b1, w2, b2, w3, b3, c](const T& x) {
                       const Index n = x.dim(0);
                       T z = ts::reshape(x, {n, 6});
                       z = ts::silu(ts::linear(z, w1, b1));
                       z = ts::silu(ts::linear(z, w2, b2));
                       return inject_fault(fault, "geo_mlp", ts::reshape(ts::linear(z, w3, b3), {n, c, 3}));
                     }});
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::geo_input(const Fragment& f) {
  const Index n = f.size();
  if (n == 0) throw std::invalid_argument("geo_encode: fragment has no points");
  std::vector<Scalar> v(static_cast<std::size_t>(n * 6));
  for (Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      v[static_cast<std::size_t>(i * 6 + k)] = Scalar(f.positions(i, k));
      v[static_cast<std::size_t>(i * 6 + 3 + k)] = Scalar(f.normals(i, k));
    }
  return T::from_data({n, 2, 3}, std::move(v));
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::color_input(const Fragment& f) {
  const Index n = f.size();
  std::vector<Scalar> v(static_cast<std::size_t>(n * 3));
  for (Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) v[static_cast<std::size_t>(i * 3 + k)] = Scalar(f.colors(i, k));
  return T::from_data({n, 3}, std::move(v));
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::geo_encode(const T& input) const {
  if (input.rank() != 3 || input.dim(1) != 2 || input.dim(2) != 3) {
    throw ts::ShapeError("geo_encode: expected [N, 2, 3], got " + ts::to_string(input.shape()));
  }
  if (input.dim(0) == 0) throw std::invalid_argument("geo_encode: fragment has no points");
  T x = input;
  for (const auto& layer : layers_) x = layer.apply(x);
  return x;
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::rgb_encode(const T& colors) const {
  using namespace ts;
  const Index n = colors.dim(0), cr = config_.c_rgb;
  if (cr == 0) return T::zeros({n, 0, 3});
  const Scalar inv_sqrt = Scalar(1.0 / std::sqrt(double(cr)));
  T h = linear(colors, rgb_embed_w_, rgb_embed_b_);
  for (const auto& blk : rgb_blocks_) {
    const T z = layer_norm(h, blk.ln1_g, blk.ln1_b);
    const T a = softmax(scale(matmul_bt(matmul_bt(z, blk.wq), matmul_bt(z, blk.wk)), inv_sqrt));
    h = add(h, matmul_bt(matmul(a, matmul_bt(z, blk.wv)), blk.wo));
    const T m = layer_norm(h, blk.ln2_g, blk.ln2_b);
    h = add(h, linear(silu(linear(m, blk.w1, blk.b1)), blk.w2, blk.b2));
  }
  // Per-channel 1 -> 3 expansion: out[n, c, k] = h[n, c] a[c, k] + b[c, k].
  const T tiled = reshape(add_rowwise(T::zeros({n, cr * 3}), reshape(rgb_expand_a_, {cr * 3})), {n, cr, 3});
  return reshape(add_rowwise(reshape(scale_last(tiled, h), {n, cr * 3}), rgb_expand_b_), {n, cr, 3});
}

template <typename Scalar>
Index FragmentEncoder<Scalar>::enrich_width() const {
  const Index c = config_.c_geo + config_.c_rgb;
  const Index l = config_.bands;
  return 3 * c + 6 * l + 6 * l + 2 * l;
}

template <typename Scalar>
Index FragmentEncoder<Scalar>::invariant_width() const {
  return Index(config_.gram_channels) * config_.gram_channels + 3 * Index(config_.c_rgb);
}

template <typename Scalar>
Index FragmentEncoder<Scalar>::geo_parameter_count() const {
  Index n = 0;
  for (const auto& t : geo_params_) n += t.size();
  return n;
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::enrich_features(const T& h, const Fragment& f) const {
  using namespace ts;
  const Index n = h.dim(0);
  if (f.size() != n) throw ShapeError("positional_enrich: embedding and fragment disagree on N");
  const int l = config_.bands;
  std::vector<Scalar> xyz(static_cast<std::size_t>(n * 3)), nrm(xyz.size());
  for (Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) {
      xyz[static_cast<std::size_t>(i * 3 + k)] = Scalar(f.positions(i, k));
      nrm[static_cast<std::size_t>(i * 3 + k)] = Scalar(f.normals(i, k));
    }
  const auto pe_s = positional_encoding(std::vector<Scalar>{Scalar(f.scale)}, 1, l);
  std::vector<Scalar> tiled;
  tiled.reserve(static_cast<std::size_t>(n) * pe_s.size());
  for (Index i = 0; i < n; ++i) tiled.insert(tiled.end(), pe_s.begin(), pe_s.end());
  return concat<Scalar>({reshape(h, {n, h.dim(1) * 3}), T::from_data({n, 6 * l}, positional_encoding(xyz, 3, l)),
                         T::from_data({n, 6 * l}, positional_encoding(nrm, 3, l)),
                         T::from_data({n, 2 * l}, std::move(tiled))},
                        1);
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::positional_enrich(const T& h, const Fragment& f) const {
  return ts::linear(enrich_features(h, f), shape_w_, shape_b_);
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::invariant_features(const T& h) const {
  using namespace ts;
  const Index n = h.dim(0), cg = config_.c_geo, cr = config_.c_rgb;
  const T geo = cr ? slice(h, 1, 0, cg) : h;
  const T gram = gram_readout(vn_linear(geo, seg_proj_));
  if (cr == 0) return gram;
  return concat<Scalar>({gram, reshape(slice(h, 1, cg, cr), {n, 3 * cr})}, 1);
}

template <typename Scalar>
ts::Tensor<Scalar> FragmentEncoder<Scalar>::segment_logits(const T& h) const {
  using namespace ts;
  const Index n = h.dim(0);
  const T z = silu(linear(invariant_features(h), seg_w1_, seg_b1_));
  return reshape(linear(z, seg_w2_, seg_b2_), {n});
}

#define EM3RF_INSTANTIATE(S)                                                                                   \
  template ts::Tensor<S> vn_linear(const ts::Tensor<S>&, const ts::Tensor<S>&);                                \
  template ts::Tensor<S> vn_nonlinearity(const ts::Tensor<S>&, const ts::Tensor<S>&, S);                       \
  template ts::Tensor<S> vn_normalize(const ts::Tensor<S>&);                                                   \
  template ts::Tensor<S> vn_attention(const ts::Tensor<S>&, const ts::Tensor<S>&, const ts::Tensor<S>&,        \
                                      const ts::Tensor<S>&);                                                   \
  template ts::Tensor<S> vn_attention_logits(const ts::Tensor<S>&, const ts::Tensor<S>&, const ts::Tensor<S>&); \
  template ts::Tensor<S> gram_readout(const ts::Tensor<S>&);                                                   \
  template ts::Tensor<S> fuse(const ts::Tensor<S>&, const ts::Tensor<S>&);                                     \
  template std::vector<S> positional_encoding(const std::vector<S>&, Index, int);                              \
  template class FragmentEncoder<S>;

EM3RF_INSTANTIATE(float)
EM3RF_INSTANTIATE(double)

#undef EM3RF_INSTANTIATE

}  // namespace em3rf
