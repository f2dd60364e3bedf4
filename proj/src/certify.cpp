#include "em3rf/certify.hpp"

#include <chrono>
#include <cstdio>
#include <numeric>

namespace em3rf {

using tensor::Index;
namespace ts = tensor;

template <typename Scalar>
ts::Tensor<Scalar> rotate_trailing(const ts::Tensor<Scalar>& x, const Matrix3<double>& r) {
  if (x.dim(-1) != 3) throw ts::ShapeError("rotate_trailing: last axis must be 3");
  std::vector<Scalar> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); i += 3) {
    const Vector3<double> v(x.values()[i], x.values()[i + 1], x.values()[i + 2]);
    const Vector3<double> w = r * v;
    for (int k = 0; k < 3; ++k) out[i + k] = Scalar(w[k]);
  }
  return ts::Tensor<Scalar>::from_data(x.shape(), std::move(out));
}

template <typename Scalar>
ts::Tensor<Scalar> permute_points(const ts::Tensor<Scalar>& x, const std::vector<Index>& perm) {
  const Index n = x.dim(0);
  const Index row = x.size() / std::max<Index>(n, 1);
  std::vector<Scalar> out(x.values().size());
  for (Index i = 0; i < n; ++i)
    std::copy_n(x.values().begin() + perm[i] * row, row, out.begin() + i * row);
  return ts::Tensor<Scalar>::from_data(x.shape(), std::move(out));
}

template <typename Scalar>
double relative_deviation(const ts::Tensor<Scalar>& a, const ts::Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw ts::ShapeError("relative_deviation: shape mismatch");
  double diff = 0, ref = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    diff += d * d;
    ref += double(b[i]) * double(b[i]);
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-30);
}

Fragment random_fragment(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0, 1);
  Fragment f;
  f.positions.resize(n, 3);
  f.normals.resize(n, 3);
  f.colors.resize(n, 3);
  for (Index i = 0; i < n; ++i) {
    Vector3<double> p(g(rng), g(rng), g(rng));
    p = p.normalized() * std::cbrt(u(rng));
    Vector3<double> q(g(rng), g(rng), g(rng));
    f.positions.row(i) = p.transpose();
    f.normals.row(i) = q.normalized().transpose();
    f.colors.row(i) << u(rng), u(rng), u(rng);
  }
  return center_fragment(f).first;
}

bool CertificationReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CertifyCheck& c) { return c.passed(); });
}

std::string CertificationReport::first_failure() const {
  for (const auto& c : checks)
    if (!c.passed() && c.name.rfind("geo", 0) == 0 && c.name.find("end-to-end") == std::string::npos) return c.name;
  for (const auto& c : checks)
    if (!c.passed()) return c.name;
  return {};
}

std::string CertificationReport::to_text() const {
  std::string out;
  char line[256];
  for (const auto& c : checks) {
    std::snprintf(line, sizeof line, "%-44s max_dev=%.3e tol=%.1e %s\n", c.name.c_str(), c.max_deviation, c.tolerance,
                  c.passed() ? "ok" : "VIOLATION");
    out += line;
  }
  std::snprintf(line, sizeof line, "certification %s in %.2f s", passed() ? "passed" : "FAILED", seconds);
  out += line;
  if (!passed()) out += " (first violation: " + first_failure() + ")";
  return out + "\n";
}

template <typename Scalar>
CertificationReport certify_encoder(const FragmentEncoder<Scalar>& encoder, const CertifyOptions& options) {
  using T = ts::Tensor<Scalar>;
  const auto start = std::chrono::steady_clock::now();
  const double tol = options.tolerance > 0 ? options.tolerance : (std::is_same_v<Scalar, float> ? 1e-4 : 1e-8);
  const auto& layers = encoder.geo_layers();
  const Index cg = encoder.config().c_geo, cr = encoder.config().c_rgb;

  std::vector<CertifyCheck> layer_checks;
  for (const auto& l : layers) layer_checks.push_back({l.name, 0, tol});
  CertifyCheck end_to_end{"geo_encode end-to-end (σ,R)", 0, tol};
  CertifyCheck rgb_rot{"rgb_encode rotation (bit-exact)", 0, 0};
  CertifyCheck rgb_perm{"rgb_encode permutation", 0, tol};
  CertifyCheck fused_geo{"fused block: geometry channels", 0, tol};
  CertifyCheck fused_rgb{"fused block: color channels", 0, tol};
  CertifyCheck seg{"segment_boundary rotation invariance", 0, tol};

  std::mt19937_64 rng(options.seed);
  for (int trial = 0; trial < options.trials; ++trial) {
    const Fragment f = random_fragment(options.points, rng());
    const Matrix3<double> r = sample_uniform_rotation<double>(rng).matrix();
    std::vector<Index> perm(static_cast<std::size_t>(options.points));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    auto act = [&](const T& x) { return permute_points(rotate_trailing(x, r), perm); };

    // Layer by layer, each fed the activations of the layers before it.
    T x = FragmentEncoder<Scalar>::geo_input(f);
    const T input = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const T y = layers[i].apply(x);
      const T y_moved = layers[i].apply(act(x));
      layer_checks[i].max_deviation = std::max(layer_checks[i].max_deviation, relative_deviation(y_moved, act(y)));
      x = y;
    }
    const T geo = x;
    const T geo_moved = encoder.geo_encode(act(input));
    end_to_end.max_deviation = std::max(end_to_end.max_deviation, relative_deviation(geo_moved, act(geo)));

    const T colors = FragmentEncoder<Scalar>::color_input(f);
    const T rgb = encoder.rgb_encode(colors);
    Fragment rotated = f;
    rotated.positions = f.positions * r.transpose();
    rotated.normals = f.normals * r.transpose();
    const T rgb_rotated = encoder.rgb_encode(rotated);
    for (Index i = 0; i < rgb.size(); ++i) {
      if (rgb[i] != rgb_rotated[i]) rgb_rot.max_deviation = std::max(rgb_rot.max_deviation, 1.0);
    }
    const T rgb_perm_out = encoder.rgb_encode(permute_points(colors, perm));
    rgb_perm.max_deviation = std::max(rgb_perm.max_deviation, relative_deviation(rgb_perm_out, permute_points(rgb, perm)));

    // Blockwise contract of the fused embedding.
    Fragment moved = rotated.subset(perm);
    const T h = fuse(geo, rgb);
    const T h_moved = encoder.encode(moved);
    if (cg > 0) {
      fused_geo.max_deviation = std::max(
          fused_geo.max_deviation, relative_deviation(ts::slice(h_moved, 1, 0, cg), act(ts::slice(h, 1, 0, cg))));
    }
    if (cr > 0) {
      fused_rgb.max_deviation =
          std::max(fused_rgb.max_deviation,
                   relative_deviation(ts::slice(h_moved, 1, cg, cr), permute_points(ts::slice(h, 1, cg, cr), perm)));
    }
    const T p = encoder.segment_boundary(h);
    const T p_moved = encoder.segment_boundary(h_moved);
    seg.max_deviation = std::max(seg.max_deviation, relative_deviation(p_moved, permute_points(p, perm)));
  }

  CertificationReport report;
  report.checks = layer_checks;
  for (const auto& c : {end_to_end, rgb_rot, rgb_perm, fused_geo, fused_rgb, seg}) report.checks.push_back(c);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

#define EM3RF_INSTANTIATE(S)                                                                  \
  template ts::Tensor<S> rotate_trailing(const ts::Tensor<S>&, const Matrix3<double>&);       \
  template ts::Tensor<S> permute_points(const ts::Tensor<S>&, const std::vector<Index>&);     \
  template double relative_deviation(const ts::Tensor<S>&, const ts::Tensor<S>&);             \
  template CertificationReport certify_encoder(const FragmentEncoder<S>&, const CertifyOptions&);

EM3RF_INSTANTIATE(float)
EM3RF_INSTANTIATE(double)

#undef EM3RF_INSTANTIATE

}  // namespace em3rf
