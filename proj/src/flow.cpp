#include "em3rf/flow.hpp"

#include <cmath>
#include <numeric>

namespace em3rf {

using tensor::Index;
namespace ts = tensor;

FlowSample make_flow_sample(const Pose& g0, const Pose& g1, double t) {
  if (!(t >= 0 && t < 1)) throw std::domain_error("make_flow_sample: t must lie in [0, 1)");
  FlowSample s;
  s.g0 = g0;
  s.g1 = g1;
  s.t = t;
  s.gt.rotation = geodesic_rotation(g0.rotation, g1.rotation, t);
  s.gt.translation = lerp_translation(g0.translation, g1.translation, t);
  s.target.rotational = relative_log(s.gt.rotation, g1.rotation) / (1 - t);
  s.target.translational = (g1.translation - s.gt.translation) / (1 - t);
  return s;
}

template <typename Scalar>
ts::Tensor<Scalar> tangent_rows(const std::vector<Tangent>& v) {
  std::vector<Scalar> out;
  out.reserve(v.size() * 6);
  for (const auto& x : v) {
    for (int k = 0; k < 3; ++k) out.push_back(Scalar(x.rotational[k]));
    for (int k = 0; k < 3; ++k) out.push_back(Scalar(x.translational[k]));
  }
  return ts::Tensor<Scalar>::from_data({Index(v.size()), 6}, std::move(out));
}

std::vector<Tangent> tangents_from_rows(const ts::Tensor<double>& rows) {
  if (rows.rank() != 2 || rows.dim(1) != 6) throw ts::ShapeError("tangents_from_rows: expected [M, 6]");
  std::vector<Tangent> out(static_cast<std::size_t>(rows.dim(0)));
  for (Index i = 0; i < rows.dim(0); ++i)
    for (int k = 0; k < 3; ++k) {
      out[i].rotational[k] = rows[i * 6 + k];
      out[i].translational[k] = rows[i * 6 + 3 + k];
    }
  return out;
}

template <typename Scalar>
ts::Tensor<Scalar> flow_loss(const ts::Tensor<Scalar>& pred, const ts::Tensor<Scalar>& target, double lambda) {
  if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != 6) {
    throw ts::ShapeError("flow_loss: predictions " + ts::to_string(pred.shape()) + " vs targets " +
                         ts::to_string(target.shape()));
  }
  if (!(lambda > 0)) throw std::invalid_argument("flow_loss: lambda must be positive");
  const Scalar l = Scalar(lambda);
  const auto w = ts::Tensor<Scalar>::from_data({6}, {l, l, l, 1, 1, 1});
  const auto per_row = ts::sum_axis(ts::mul_rowwise(ts::square(ts::sub(pred, target)), w), 1);
  return ts::mean(per_row);
}

double flow_loss(const std::vector<std::vector<Tangent>>& pred, const std::vector<std::vector<FlowSample>>& samples,
                 double lambda) {
  if (pred.size() != samples.size() || pred.empty()) throw std::invalid_argument("flow_loss: batch size mismatch");
  double total = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    if (pred[b].size() != samples[b].size() || pred[b].empty())
      throw std::invalid_argument("flow_loss: fragment count mismatch in object " + std::to_string(b));
    std::vector<Tangent> targets;
    for (const auto& s : samples[b]) targets.push_back(s.target);
    total += flow_loss(tangent_rows<double>(pred[b]), tangent_rows<double>(targets), lambda).item();
  }
  return total / double(pred.size());
}

template <typename Scalar>
ts::Tensor<Scalar> so3_exp_rows(const ts::Tensor<Scalar>& omega) {
  if (omega.rank() != 2 || omega.dim(1) != 3) throw ts::ShapeError("so3_exp_rows: expected [M, 3]");
  const Index m = omega.dim(0);
  std::vector<Scalar> out(static_cast<std::size_t>(m * 9));
  std::vector<Matrix3<double>> rs(static_cast<std::size_t>(m));
  std::vector<Vector3<double>> ws(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    ws[i] = Vector3<double>(omega[i * 3], omega[i * 3 + 1], omega[i * 3 + 2]);
    rs[i] = so3_exp(ws[i]).matrix();
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) out[i * 9 + a * 3 + b] = Scalar(rs[i](a, b));
  }
  return ts::make_result<Scalar>("so3_exp", {m, 3, 3}, std::move(out), {omega}, [rs, ws](ts::Node<Scalar>& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < rs.size(); ++i) {
      Matrix3<double> g;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) g(a, b) = double(self.grad[i * 9 + a * 3 + b]);
      const Matrix3<double> a = rs[i].transpose() * g;
      const Vector3<double> v(a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1));
      // Right Jacobian: exp(w + d) ≈ exp(w) exp(J_r d).
      const double th2 = ws[i].squaredNorm(), th = std::sqrt(th2);
      double c1, c2;
      if (th < 1e-4) {
        c1 = 0.5 - th2 / 24;
        c2 = 1.0 / 6 - th2 / 120;
      } else {
        c1 = (1 - std::cos(th)) / th2;
        c2 = (th - std::sin(th)) / (th2 * th);
      }
      const Matrix3<double> k = hat(ws[i]);
      const Matrix3<double> jr = Matrix3<double>::Identity() - c1 * k + c2 * k * k;
      const Vector3<double> gw = jr.transpose() * v;
      for (int c = 0; c < 3; ++c) p.grad[i * 3 + c] += Scalar(gw[c]);
    }
  });
}

// ---------------------------------------------------------------------------

VelocityArch parse_velocity_arch(const std::string& name) {
  if (name == "equivariant") return VelocityArch::equivariant;
  if (name == "flat") return VelocityArch::flat;
  throw std::invalid_argument("unknown velocity architecture '" + name + "' (expected equivariant or flat)");
}

VelocityParam parse_velocity_param(const std::string& name) {
  if (name == "endpoint") return VelocityParam::endpoint;
  if (name == "direct") return VelocityParam::direct;
  throw std::invalid_argument("unknown velocity parameterization '" + name + "' (expected endpoint or direct)");
}

std::string velocity_arch_name(VelocityArch a) { return a == VelocityArch::flat ? "flat" : "equivariant"; }
std::string velocity_param_name(VelocityParam p) { return p == VelocityParam::direct ? "direct" : "endpoint"; }

StartMode parse_start_mode(const std::string& name) {
  if (name == "sample_p0") return StartMode::sample_p0;
  if (name == "identity_start") return StartMode::identity_start;
  throw std::invalid_argument("unknown start mode '" + name + "' (expected sample_p0 or identity_start)");
}

std::string start_mode_name(StartMode m) { return m == StartMode::identity_start ? "identity_start" : "sample_p0"; }

template <typename Scalar>
FragmentFeatures<Scalar> extract_features(const FragmentEncoder<Scalar>& encoder, const Fragment& f, bool with_enrich) {
  using T = ts::Tensor<Scalar>;
  const Index n = f.size(), cg = encoder.config().c_geo, cr = encoder.config().c_rgb;
  const T h = encoder.encode(f);
  FragmentFeatures<Scalar> out;
  std::vector<T> vec_parts;
  if (cg > 0) vec_parts.push_back(ts::slice(h, 1, 0, cg));
  vec_parts.push_back(FragmentEncoder<Scalar>::geo_input(f));
  out.vectors = ts::concat<Scalar>(vec_parts, 1).detach();
  const T p = ts::reshape(encoder.segment_boundary(h), {n, 1});
  out.scalars = (cr > 0 ? ts::concat<Scalar>({ts::reshape(ts::slice(h, 1, cg, cr), {n, 3 * cr}), p}, 1) : p).detach();
  if (with_enrich) out.enrich = encoder.enrich_features(h, f).detach();
  out.scale = f.scale;
  return out;
}

template <typename Scalar>
VelocityNet<Scalar>::VelocityNet(const FlowConfig& config, const EncoderConfig& encoder,
                                 ts::ParameterStore<Scalar>& store, std::uint64_t seed)
    : config_(config), encoder_(encoder), bands_(encoder.bands) {
  if (config.pool_channels < 1 || config.pool_gates < 0 || config.vector_width < 1 || config.hidden < 1 ||
      config.blocks < 0 || config.cross_channels < 1) {
    throw std::invalid_argument("velocity net: widths must be positive");
  }
  std::mt19937_64 rng(seed);
  const Index cin = encoder.c_geo + 2, k = config.pool_channels, g = config.pool_gates, hs = config.hidden;
  const Index cx = config.vector_width, gch = encoder.gram_channels, sin = 3 * Index(encoder.c_rgb) + 1;
  const Index pe = 2 * Index(bands_);

  if (config.arch == VelocityArch::equivariant) {
    pool_w_ = store.add_glorot("flow/pool/vectors", {k, cin}, rng);
    gram_w_ = store.add_glorot("flow/pool/gram", {gch, cin}, rng);
    point_w1_ = store.add_glorot("flow/pool/w1", {hs, gch * gch + sin}, rng);
    point_b1_ = store.add_constant("flow/pool/b1", {hs}, Scalar(0));
    if (g > 0) {
      gate_w_ = store.add_glorot("flow/pool/gate/w", {g, hs}, rng);
      gate_b_ = store.add_constant("flow/pool/gate/b", {g}, Scalar(0));
    }
    lift_vec_ = store.add_glorot("flow/lift/vectors", {cx, (g + 1) * k + 1}, rng);
    lift_s_w_ = store.add_glorot("flow/lift/w", {hs, (g + 1) * hs + 2 * pe}, rng);
  } else {
    lift_s_w_ = store.add_glorot("flow/lift/w", {hs, Index(encoder.shape_dim) + 12 + 2 * pe}, rng);
    shape_w_ = store.add_glorot("flow/flat/shape/w", {Index(encoder.shape_dim), flat_enrich_width(encoder)}, rng);
    shape_b_ = store.add_constant("flow/flat/shape/b", {Index(encoder.shape_dim)}, Scalar(0));
  }
  lift_s_b_ = store.add_constant("flow/lift/b", {hs}, Scalar(0));
  anchor_embed_ = store.add_glorot("flow/anchor", {1, hs}, rng);

  const Index ca = config.cross_channels;
  for (int b = 0; b < config.blocks; ++b) {
    const std::string p = "flow/block" + std::to_string(b) + "/";
    Block blk;
    blk.ln_g = store.add_constant(p + "ln1/g", {hs}, Scalar(1));
    blk.ln_b = store.add_constant(p + "ln1/b", {hs}, Scalar(0));
    blk.q_s = store.add_glorot(p + "q", {hs, hs}, rng);
    blk.k_s = store.add_glorot(p + "k", {hs, hs}, rng);
    blk.v_s = store.add_glorot(p + "v", {hs, hs}, rng);
    blk.o_s = store.add_glorot(p + "o", {hs, hs}, rng);
    blk.ln2_g = store.add_constant(p + "ln2/g", {hs}, Scalar(1));
    blk.ln2_b = store.add_constant(p + "ln2/b", {hs}, Scalar(0));
    const Index mlp_in = config.arch == VelocityArch::equivariant ? hs + gch * gch : hs;
    blk.mlp_w1 = store.add_glorot(p + "mlp/w1", {2 * hs, mlp_in}, rng);
    blk.mlp_b1 = store.add_constant(p + "mlp/b1", {2 * hs}, Scalar(0));
    blk.mlp_w2 = store.add_glorot(p + "mlp/w2", {hs, 2 * hs}, rng);
    blk.mlp_b2 = store.add_constant(p + "mlp/b2", {hs}, Scalar(0));
    if (config.arch == VelocityArch::equivariant) {
      blk.q_vec = store.add_glorot(p + "q_vec", {ca, cx}, rng);
      blk.k_vec = store.add_glorot(p + "k_vec", {ca, cx}, rng);
      blk.v_vec = store.add_glorot(p + "v_vec", {cx, cx}, rng);
      blk.read_vec = store.add_glorot(p + "read_vec", {gch, cx}, rng);
      blk.upd_vec = store.add_glorot(p + "update_vec", {cx, cx}, rng);
      blk.upd_gate_w = store.add_glorot(p + "update_gate/w", {cx, hs}, rng);
      blk.upd_gate_b = store.add_constant(p + "update_gate/b", {cx}, Scalar(0));
    }
    blocks_.push_back(blk);
  }

  // Heads start close to zero so early velocities are small.
  auto small = [&](const std::string& name, const ts::Shape& shape) {
    T w = store.add_glorot(name, shape, rng);
    for (auto& v : w.values()) v *= Scalar(0.01);
    return w;
  };
  head_ln_g_ = store.add_constant("flow/head/ln/g", {hs}, Scalar(1));
  head_ln_b_ = store.add_constant("flow/head/ln/b", {hs}, Scalar(0));
  if (config.arch == VelocityArch::equivariant) {
    head_trans_w_ = small("flow/head/translation/w", {cx, hs});
    head_trans_b_ = store.add_constant("flow/head/translation/b", {cx}, Scalar(0));
    head_rot_w_ = small("flow/head/rotation/w", {cx, hs});
    head_rot_b_ = store.add_constant("flow/head/rotation/b", {cx}, Scalar(0));
    cross_u_ = store.add_glorot("flow/head/cross/u", {ca, cx}, rng);
    cross_v_ = store.add_glorot("flow/head/cross/v", {ca, cx}, rng);
    head_cross_w_ = small("flow/head/cross/w", {ca, hs});
    head_cross_b_ = store.add_constant("flow/head/cross/b", {ca}, Scalar(0));
  } else {
    flat_head_w_ = small("flow/head/w", {6, hs});
    flat_head_b_ = store.add_constant("flow/head/b", {6}, Scalar(0));
  }
}

template <typename Scalar>
Index VelocityNet<Scalar>::flat_enrich_width(const EncoderConfig& e) {
  const Index c = e.c_geo + e.c_rgb, l = e.bands;
  return 3 * c + 14 * l;
}

namespace {

template <typename Scalar>
ts::Tensor<Scalar> constant(const ts::Shape& shape, std::vector<Scalar> v) {
  return ts::Tensor<Scalar>::from_data(shape, std::move(v));
}

// Cross product along the trailing axis of two [..., 3] tensors.
template <typename Scalar>
ts::Tensor<Scalar> cross_last(const ts::Tensor<Scalar>& u, const ts::Tensor<Scalar>& w) {
  const int ax = u.rank() - 1;
  auto c = [&](const ts::Tensor<Scalar>& t, int i) { return ts::slice(t, ax, i, 1); };
  return ts::concat<Scalar>({ts::sub(ts::mul(c(u, 1), c(w, 2)), ts::mul(c(u, 2), c(w, 1))),
                             ts::sub(ts::mul(c(u, 2), c(w, 0)), ts::mul(c(u, 0), c(w, 2))),
                             ts::sub(ts::mul(c(u, 0), c(w, 1)), ts::mul(c(u, 1), c(w, 0)))},
                            ax);
}

template <typename Scalar>
std::vector<Scalar> time_scalars(double t, double scale, int bands) {
  auto v = positional_encoding(std::vector<Scalar>{Scalar(t)}, 1, bands);
  const auto s = positional_encoding(std::vector<Scalar>{Scalar(scale)}, 1, bands);
  v.insert(v.end(), s.begin(), s.end());
  return v;
}

}  // namespace

template <typename Scalar>
ts::Tensor<Scalar> VelocityNet<Scalar>::pooled_vectors_and_scalars(const FragmentFeatures<Scalar>& f,
                                                                    T& scalars_out) const {
  using namespace ts;
  const Index n = f.vectors.dim(0), k = config_.pool_channels, g = config_.pool_gates;
  const T v = reshape(vn_linear(f.vectors, pool_w_), {n, 3 * k});
  const T inv = concat<Scalar>({gram_readout(vn_linear(f.vectors, gram_w_)), f.scalars}, 1);
  const T z = silu(linear(inv, point_w1_, point_b1_));
  std::vector<T> vec_parts, s_parts;
  if (g > 0) {
    const T attn = softmax(transpose(linear(z, gate_w_, gate_b_)));
    vec_parts.push_back(matmul(attn, v));
    s_parts.push_back(reshape(matmul(attn, z), {g * z.dim(1)}));
  }
  vec_parts.push_back(reshape(mean_axis(v, 0), {1, 3 * k}));
  s_parts.push_back(mean_axis(z, 0));
  scalars_out = concat<Scalar>(s_parts, 0);
  return reshape(concat<Scalar>(vec_parts, 0), {(g + 1) * k, 3});
}

template <typename Scalar>
ts::Tensor<Scalar> VelocityNet<Scalar>::forward(const std::vector<const FragmentFeatures<Scalar>*>& fragments,
                                                const std::vector<Pose>& poses, double t, std::size_t anchor) const {
  if (fragments.empty()) throw std::invalid_argument("predict_velocity: object has no fragments");
  if (fragments.size() != poses.size()) throw std::invalid_argument("predict_velocity: one pose per fragment");
  if (anchor >= fragments.size()) throw std::invalid_argument("predict_velocity: anchor index out of range");
  if (!(t >= 0 && t < 1)) throw std::domain_error("predict_velocity: t must lie in [0, 1)");
  T out = config_.arch == VelocityArch::equivariant ? forward_equivariant(fragments, poses, t, anchor)
                                                    : forward_flat(fragments, poses, t, anchor);
  if (config_.param == VelocityParam::endpoint) out = ts::scale(out, Scalar(1.0 / (1.0 - t)));
  return out;
}

template <typename Scalar>
ts::Tensor<Scalar> VelocityNet<Scalar>::forward_equivariant(
    const std::vector<const FragmentFeatures<Scalar>*>& fragments, const std::vector<Pose>& poses, double t,
    std::size_t anchor) const {
  using namespace ts;
  const Index m = Index(fragments.size()), hs = config_.hidden, cx = config_.vector_width;
  std::vector<T> xs, ss;
  std::vector<Scalar> rot_stack;
  for (Index i = 0; i < m; ++i) {
    T pooled_s;
    const T pooled_v = pooled_vectors_and_scalars(*fragments[i], pooled_s);
    const Matrix3<double> r = poses[i].rotation.matrix();
    std::vector<Scalar> rt(9), beta(3);
    for (int a = 0; a < 3; ++a) {
      beta[a] = Scalar(poses[i].translation[a]);
      for (int b = 0; b < 3; ++b) {
        rt[a * 3 + b] = Scalar(r(b, a));
        rot_stack.push_back(Scalar(r(a, b)));
      }
    }
    // Body-frame pooled vectors moved to the world frame, plus the position.
    xs.push_back(concat<Scalar>({matmul(pooled_v, constant<Scalar>({3, 3}, rt)), constant<Scalar>({1, 3}, beta)}, 0));
    ss.push_back(concat<Scalar>({pooled_s, constant<Scalar>({4 * Index(bands_)}, time_scalars<Scalar>(t, fragments[i]->scale, bands_))}, 0));
  }
  const Index kin = xs[0].dim(0);
  T x = vn_linear(reshape(concat<Scalar>(xs, 0), {m, kin, 3}), lift_vec_);
  T s = linear(reshape(concat<Scalar>(ss, 0), {m, ss[0].dim(0)}), lift_s_w_, lift_s_b_);
  std::vector<Scalar> onehot(static_cast<std::size_t>(m), Scalar(0));
  onehot[anchor] = Scalar(1);
  s = add(s, matmul(constant<Scalar>({m, 1}, onehot), anchor_embed_));

  const Index ca = config_.cross_channels;
  const Scalar inv_sqrt = Scalar(1.0 / std::sqrt(double(3 * ca + hs)));
  for (const auto& b : blocks_) {
    const T sn = layer_norm(s, b.ln_g, b.ln_b);
    const T xn = vn_normalize(x);
    const T logits = add(matmul_bt(reshape(vn_linear(xn, b.q_vec), {m, 3 * ca}), reshape(vn_linear(xn, b.k_vec), {m, 3 * ca})),
                         matmul_bt(matmul_bt(sn, b.q_s), matmul_bt(sn, b.k_s)));
    const T a = softmax(scale(logits, inv_sqrt));
    s = add(s, matmul_bt(matmul(a, matmul_bt(sn, b.v_s)), b.o_s));
    x = add(x, reshape(matmul(a, reshape(vn_linear(x, b.v_vec), {m, 3 * cx})), {m, cx, 3}));

    const T gram = gram_readout(vn_linear(x, b.read_vec));
    const T h = concat<Scalar>({layer_norm(s, b.ln2_g, b.ln2_b), gram}, 1);
    s = add(s, linear(silu(linear(h, b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2));
    x = add(x, scale_last(vn_linear(x, b.upd_vec), sigmoid(linear(s, b.upd_gate_w, b.upd_gate_b))));
  }

  auto weigh = [m](const T& w, const T& vecs) {
    return reshape(bmm(reshape(w, {m, 1, w.dim(1)}), vecs), {m, 3});
  };
  s = layer_norm(s, head_ln_g_, head_ln_b_);
  const T v_beta = weigh(linear(s, head_trans_w_, head_trans_b_), x);
  const T crosses = cross_last(vn_normalize(vn_linear(x, cross_u_)), vn_normalize(vn_linear(x, cross_v_)));
  const T omega = add(weigh(linear(s, head_rot_w_, head_rot_b_), x), weigh(linear(s, head_cross_w_, head_cross_b_), crosses));
  // World-frame angular velocity to the body frame: rows ω R = (Rᵀ ω)ᵀ.
  const T omega_body = reshape(bmm(reshape(omega, {m, 1, 3}), constant<Scalar>({m, 3, 3}, rot_stack)), {m, 3});
  return concat<Scalar>({omega_body, v_beta}, 1);
}

template <typename Scalar>
ts::Tensor<Scalar> VelocityNet<Scalar>::forward_flat(const std::vector<const FragmentFeatures<Scalar>*>& fragments,
                                                     const std::vector<Pose>& poses, double t,
                                                     std::size_t anchor) const {
  using namespace ts;
  const Index m = Index(fragments.size()), hs = config_.hidden;
  std::vector<T> tokens;
  for (Index i = 0; i < m; ++i) {
    const auto& f = *fragments[i];
    if (f.enrich.rank() != 2) throw std::invalid_argument("flat velocity net needs enriched features");
    const T shape = mean_axis(linear(f.enrich, shape_w_, shape_b_), 0);
    std::vector<Scalar> pose(12);
    const Matrix3<double> r = poses[i].rotation.matrix();
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) pose[a * 3 + b] = Scalar(r(a, b));
      pose[9 + a] = Scalar(poses[i].translation[a]);
    }
    auto ts_ = time_scalars<Scalar>(t, f.scale, bands_);
    pose.insert(pose.end(), ts_.begin(), ts_.end());
    tokens.push_back(concat<Scalar>({shape, constant<Scalar>({Index(pose.size())}, pose)}, 0));
  }
  T s = linear(reshape(concat<Scalar>(tokens, 0), {m, tokens[0].dim(0)}), lift_s_w_, lift_s_b_);
  std::vector<Scalar> onehot(static_cast<std::size_t>(m), Scalar(0));
  onehot[anchor] = Scalar(1);
  s = add(s, matmul(constant<Scalar>({m, 1}, onehot), anchor_embed_));
  const Scalar inv_sqrt = Scalar(1.0 / std::sqrt(double(hs)));
  for (const auto& b : blocks_) {
    const T sn = layer_norm(s, b.ln_g, b.ln_b);
    const T a = softmax(scale(matmul_bt(matmul_bt(sn, b.q_s), matmul_bt(sn, b.k_s)), inv_sqrt));
    s = add(s, matmul_bt(matmul(a, matmul_bt(sn, b.v_s)), b.o_s));
    s = add(s, linear(silu(linear(layer_norm(s, b.ln2_g, b.ln2_b), b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2));
  }
  return linear(layer_norm(s, head_ln_g_, head_ln_b_), flat_head_w_, flat_head_b_);
}

template <typename Scalar>
std::vector<Tangent> predict_velocity(const VelocityNet<Scalar>& net, const std::vector<Pose>& poses, double t,
                                      const std::vector<const FragmentFeatures<Scalar>*>& tokens, std::size_t anchor) {
  const auto rows = net.forward(tokens, poses, t, anchor);
  std::vector<double> v(rows.values().begin(), rows.values().end());
  return tangents_from_rows(ts::Tensor<double>::from_data(rows.shape(), std::move(v)));
}

// ---------------------------------------------------------------------------

std::vector<Pose> integrate(const VelocityField& field, std::vector<Pose> poses, const IntegrateOptions& options) {
  if (options.steps < 1) throw std::invalid_argument("integrate: steps must be >= 1");
  const double dt = 1.0 / options.steps;
  for (int k = 0; k < options.steps; ++k) {
    const auto v = field(poses, k * dt);
    if (v.size() != poses.size()) throw std::invalid_argument("integrate: field returned the wrong number of velocities");
    for (std::size_t i = 0; i < poses.size(); ++i) {
      if (!v[i].all_finite())
        throw DivergenceError("integrate: non-finite velocity for fragment " + std::to_string(i) + " at step " +
                              std::to_string(k));
      if (options.frozen && *options.frozen == i) continue;
      Rotation<double> r = exp_transport(poses[i].rotation, AxisAngle<double>(dt * v[i].rotational));
      if (r.orthonormality_error() > options.reproject_tolerance) r = project_to_so3(r.matrix());
      poses[i].rotation = r;
      poses[i].translation += dt * v[i].translational;
    }
  }
  return poses;
}

VelocityField exact_target_field(const std::vector<Pose>& targets) {
  return [targets](const std::vector<Pose>& poses, double t) {
    std::vector<Tangent> v(poses.size());
    for (std::size_t i = 0; i < poses.size(); ++i) {
      v[i].rotational = relative_log(poses[i].rotation, targets[i].rotation) / (1 - t);
      v[i].translational = (targets[i].translation - poses[i].translation) / (1 - t);
    }
    return v;
  };
}

std::size_t select_anchor(const std::vector<Fragment>& fragments) {
  if (fragments.empty()) throw std::invalid_argument("select_anchor: no fragments");
  auto fingerprint = [](const Fragment& f) {
    const Vector3<double> c = f.positions.colwise().mean();
    double spread = 0;
    for (Index i = 0; i < f.size(); ++i) spread += (f.positions.row(i).transpose() - c).squaredNorm();
    return spread + f.colors.sum();
  };
  std::size_t best = 0;
  double best_fp = fingerprint(fragments[0]);
  for (std::size_t i = 1; i < fragments.size(); ++i) {
    const double fp = fingerprint(fragments[i]);
    if (fragments[i].size() > fragments[best].size() || (fragments[i].size() == fragments[best].size() && fp > best_fp)) {
      best = i;
      best_fp = fp;
    }
  }
  return best;
}

std::vector<Pose> relative_to_anchor(const std::vector<Pose>& poses, std::size_t anchor) {
  const Pose inv = poses.at(anchor).inverse();
  std::vector<Pose> out;
  for (const auto& g : poses) out.push_back(inv * g);
  return out;
}

#define EM3RF_INSTANTIATE(S)                                                                                  \
  template ts::Tensor<S> tangent_rows(const std::vector<Tangent>&);                                          \
  template ts::Tensor<S> flow_loss(const ts::Tensor<S>&, const ts::Tensor<S>&, double);                      \
  template ts::Tensor<S> so3_exp_rows(const ts::Tensor<S>&);                                                  \
  template FragmentFeatures<S> extract_features(const FragmentEncoder<S>&, const Fragment&, bool);            \
  template class VelocityNet<S>;                                                                              \
  template std::vector<Tangent> predict_velocity(const VelocityNet<S>&, const std::vector<Pose>&, double,     \
                                                 const std::vector<const FragmentFeatures<S>*>&, std::size_t);

EM3RF_INSTANTIATE(float)
EM3RF_INSTANTIATE(double)

#undef EM3RF_INSTANTIATE

}  // namespace em3rf
