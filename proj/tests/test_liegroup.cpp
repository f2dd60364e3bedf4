#include "test_main.hpp"

#include "em3rf/liegroup.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <numbers>
#include <random>

using namespace em3rf;
using R3 = Rotation<double>;
using V3 = Vector3<double>;

namespace {

constexpr double kPi = std::numbers::pi;

// Matrix exponential of hat(w) by its power series; independent of Rodrigues.
Matrix3<double> series_exp(const V3& w) {
  const Matrix3<double> k = hat(w);
  Matrix3<double> term = Matrix3<double>::Identity();
  Matrix3<double> acc = Matrix3<double>::Identity();
  for (int n = 1; n < 60; ++n) {
    term = term * k / double(n);
    acc += term;
  }
  return acc;
}

V3 random_axis_angle(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0, 1);
  V3 axis(g(rng), g(rng), g(rng));
  axis.normalize();
  // Cube-root sampling puts more mass near max_angle, where log is hardest.
  return axis * max_angle * std::cbrt(u(rng));
}

double max_abs(const Matrix3<double>& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("so3_exp examples") {
  CHECK(max_abs(so3_exp<double>(V3::Zero()).matrix() - Matrix3<double>::Identity()) == 0.0);

  Matrix3<double> quarter;
  quarter << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK(max_abs(so3_exp<double>(V3(0, 0, kPi / 2)).matrix() - quarter) < 1e-15);

  std::mt19937_64 rng(11);
  for (int i = 0; i < 20; ++i) {
    std::normal_distribution<double> g;
    V3 w(g(rng), g(rng), g(rng));
    w = w.normalized() * 1.2;
    CHECK(max_abs(so3_exp(w).matrix() - series_exp(w)) < 1e-13);
  }
  // Series branch stays accurate below the small-angle threshold.
  const V3 tiny(3e-9, -1e-9, 2e-9);
  CHECK(max_abs(so3_exp(tiny).matrix() - series_exp(tiny)) < 1e-16);

  CHECK_THROWS_AS((void)so3_exp<double>(V3(std::nan(""), 0, 0)), std::invalid_argument);
}

TEST_CASE("so3_log examples and roundtrip") {
  CHECK(so3_log(R3::identity()).norm() == 0.0);

  Matrix3<double> quarter;
  quarter << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK((so3_log(R3::from_matrix(quarter)) - V3(0, 0, kPi / 2)).norm() < 1e-15);

  std::mt19937_64 rng(5);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const V3 w = random_axis_angle(rng, kPi - 1e-3);
    worst = std::max(worst, (so3_log(so3_exp(w)) - w).norm());
    const R3 r = so3_exp(w);
    worst = std::max(worst, max_abs(so3_exp(so3_log(r)).matrix() - r.matrix()));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("so3_log near pi uses the eigen-axis branch") {
  const V3 axis = V3(1, 2, -2).normalized();
  for (double gap : {0.0, 1e-12, 1e-7, 1e-6, 1e-4}) {
    const V3 w = axis * (kPi - gap);
    const V3 back = so3_log(so3_exp(w));
    CAPTURE(gap);
    CHECK(back.allFinite());
    // At exactly pi both signs are valid logarithms.
    if (gap == 0.0) {
      CHECK(std::min((back - w).norm(), (back + w).norm()) < 1e-9);
    } else {
      CHECK((back - w).norm() < 1e-8);
    }
    CHECK(back.norm() <= kPi + 1e-12);
  }
}

TEST_CASE("invalid rotations are rejected") {
  Matrix3<double> m = Matrix3<double>::Identity();
  m(0, 0) = 2;
  CHECK_THROWS_AS(R3::from_matrix(m), std::invalid_argument);
  Matrix3<double> reflection = Matrix3<double>::Identity();
  reflection(2, 2) = -1;
  CHECK_THROWS_AS(R3::from_matrix(reflection), std::invalid_argument);
}

TEST_CASE("relative_log and geodesic_rotation") {
  std::mt19937_64 rng(7);
  const R3 r = sample_uniform_rotation<double>(rng);
  CHECK(relative_log(r, r).norm() < 1e-15);
  CHECK((relative_log(R3::identity(), so3_exp<double>(V3(0, 0, kPi / 2))) - V3(0, 0, kPi / 2)).norm() < 1e-15);

  for (int i = 0; i < 200; ++i) {
    const R3 r0 = sample_uniform_rotation<double>(rng);
    const R3 r1 = sample_uniform_rotation<double>(rng);
    // exp-transport of the residual from r0 reaches r1.
    CHECK(max_abs(exp_transport(r0, relative_log(r0, r1)).matrix() - r1.matrix()) < 1e-9);
    CHECK(max_abs(geodesic_rotation(r0, r1, 1.0).matrix() - r1.matrix()) < 1e-9);
    CHECK(max_abs(geodesic_rotation(r0, r1, 0.0).matrix() - r0.matrix()) < 1e-12);
    const double full = rotation_angle(r0, r1);
    const double part = rotation_angle(r0, geodesic_rotation(r0, r1, 0.25));
    if (full < kPi - 1e-3) CHECK(std::abs(part - 0.25 * full) < 1e-9);
  }

  const R3 half = geodesic_rotation(R3::identity(), so3_exp<double>(V3(0, 0, kPi / 2)), 0.5);
  CHECK(max_abs(half.matrix() - so3_exp<double>(V3(0, 0, kPi / 4)).matrix()) < 1e-15);
  for (double t : {0.0, 0.3, 1.0}) CHECK(max_abs(geodesic_rotation(r, r, t).matrix() - r.matrix()) < 1e-12);

  CHECK_THROWS_AS((void)geodesic_rotation(r, r, 1.5), std::domain_error);
  CHECK_THROWS_AS((void)geodesic_rotation(r, r, -0.1), std::domain_error);
}

TEST_CASE("lerp_translation") {
  CHECK((lerp_translation<double>(V3::Zero(), V3(2, 0, 0), 0.5) - V3(1, 0, 0)).norm() == 0.0);
  const V3 b(0.1, -2, 3);
  CHECK((lerp_translation(b, b, 0.37) - b).norm() < 1e-15);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 50; ++i) {
    const V3 a(u(rng), u(rng), u(rng)), c(u(rng), u(rng), u(rng));
    const double t = (u(rng) + 5) / 10;
    V3 expect;
    for (int k = 0; k < 3; ++k) expect[k] = (1 - t) * a[k] + t * c[k];
    CHECK((lerp_translation(a, c, t) - expect).norm() < 1e-14);
  }
}

TEST_CASE("composition is associative and inverse is exact") {
  std::mt19937_64 rng(13);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = sample_initial_pose<double>(rng);
    const auto b = sample_initial_pose<double>(rng);
    const auto c = sample_initial_pose<double>(rng);
    const auto l = (a * b) * c;
    const auto r = a * (b * c);
    worst = std::max({worst, max_abs(l.rotation.matrix() - r.rotation.matrix()), (l.translation - r.translation).norm()});
    const auto id = a * a.inverse();
    worst = std::max({worst, max_abs(id.rotation.matrix() - Matrix3<double>::Identity()), id.translation.norm()});
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("sampled rotations are valid") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 1000; ++i) {
    const R3 r = sample_uniform_rotation<double>(rng);
    CHECK(r.orthonormality_error() < 1e-6);
    CHECK(std::abs(r.matrix().determinant() - 1) < 1e-6);
  }
}

TEST_CASE("initial pose sampler: Haar angle density and Gaussian translation") {
  std::mt19937_64 rng(2024);
  constexpr int kSamples = 100000;
  constexpr int kBins = 30;
  std::vector<int> hist(kBins, 0);
  V3 mean = V3::Zero();
  for (int i = 0; i < kSamples; ++i) {
    const auto g = sample_initial_pose<double>(rng);
    const double angle = so3_log(g.rotation).norm();
    hist[std::min(kBins - 1, int(angle / kPi * kBins))]++;
    mean += g.translation;
  }
  mean /= kSamples;
  // Angle CDF of a Haar rotation: (theta - sin theta) / pi.
  double chi2 = 0;
  for (int b = 0; b < kBins; ++b) {
    const double lo = kPi * b / kBins, hi = kPi * (b + 1) / kBins;
    const double p = ((hi - std::sin(hi)) - (lo - std::sin(lo))) / kPi;
    const double expect = p * kSamples;
    chi2 += (hist[b] - expect) * (hist[b] - expect) / expect;
  }
  const boost::math::chi_squared dist(kBins - 1);
  const double p_value = 1 - boost::math::cdf(dist, chi2);
  CAPTURE(chi2);
  CHECK(p_value > 0.01);
  CHECK(mean.cwiseAbs().maxCoeff() < 3.0 / std::sqrt(double(kSamples)));

  std::mt19937_64 a(99), b(99);
  const auto ga = sample_initial_pose<double>(a);
  const auto gb = sample_initial_pose<double>(b);
  CHECK(ga.rotation.matrix() == gb.rotation.matrix());
  CHECK(ga.translation == gb.translation);
}

TEST_CASE("apply_transform") {
  std::mt19937_64 rng(23);
  PointMatrix<double> pts = PointMatrix<double>::Random(40, 3);
  PointMatrix<double> vec = PointMatrix<double>::Random(40, 3);
  for (Eigen::Index i = 0; i < vec.rows(); ++i) vec.row(i).normalize();

  auto [p0, v0] = apply_transform(RigidTransform<double>::identity(), pts, vec);
  CHECK((p0 - pts).norm() == 0.0);
  CHECK((v0 - vec).norm() == 0.0);

  RigidTransform<double> shift;
  shift.translation = V3(1, -2, 0.5);
  auto [p1, v1] = apply_transform(shift, pts, vec);
  CHECK((v1 - vec).norm() == 0.0);
  CHECK((p1.rowwise() - shift.translation.transpose() - pts).norm() < 1e-14);

  const auto g = sample_initial_pose<double>(rng);
  auto [p2, v2] = apply_transform(g, pts, vec);
  const V3 c = pts.colwise().mean().transpose();
  CHECK((p2.colwise().mean().transpose() - (g.rotation * c + g.translation)).norm() < 1e-12);
  for (Eigen::Index i = 0; i < v2.rows(); ++i) CHECK(std::abs(v2.row(i).norm() - 1.0) < 1e-6);

  CHECK_THROWS_AS((void)apply_transform(g, pts, PointMatrix<double>(3, 3)), std::invalid_argument);
}

TEST_CASE("project_to_so3 returns the nearest rotation") {
  std::mt19937_64 rng(29);
  const R3 r = sample_uniform_rotation<double>(rng);
  Matrix3<double> noisy = r.matrix() + 1e-4 * Matrix3<double>::Random();
  const R3 p = project_to_so3(noisy);
  CHECK(p.orthonormality_error() < 1e-12);
  CHECK(std::abs(p.matrix().determinant() - 1) < 1e-12);
  CHECK(max_abs(p.matrix() - r.matrix()) < 1e-3);
}
