// SO(3)/SE(3) primitives: exponential and logarithm maps, geodesic
// interpolation, group composition/action and the initial pose sampler.
//
// Rotations are stored as 3x3 matrices. Every function is templated on the
// scalar type so the same code serves float32 training and float64 checks.

#ifndef EM3RF_LIEGROUP_HPP
#define EM3RF_LIEGROUP_HPP

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace em3rf {

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

/// N x 3 row-major block of points or directions.
template <typename Scalar>
using PointMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Axis-angle vector in so(3): direction is the axis, norm the angle.
template <typename Scalar>
using AxisAngle = Vector3<Scalar>;

namespace detail {

template <typename Scalar>
constexpr Scalar orthonormality_tolerance() {
  return std::is_same_v<Scalar, float> ? Scalar(1e-4) : Scalar(1e-6);
}

// Below this angle exp/log use their Taylor series.
template <typename Scalar>
constexpr Scalar small_angle() {
  return Scalar(1e-8);
}

// cos(theta) below which log switches to the eigen-axis branch.
template <typename Scalar>
constexpr Scalar near_pi_cos() {
  return Scalar(-0.99);
}

}  // namespace detail

template <typename Scalar>
[[nodiscard]] Matrix3<Scalar> hat(const Vector3<Scalar>& v) {
  Matrix3<Scalar> s;
  // clang-format off
  s << Scalar(0), -v.z(),     v.y(),
       v.z(),     Scalar(0), -v.x(),
      -v.y(),     v.x(),      Scalar(0);
  // clang-format on
  return s;
}

/// Inverse of hat() on the skew part of m.
template <typename Scalar>
[[nodiscard]] Vector3<Scalar> vee(const Matrix3<Scalar>& m) {
  return Vector3<Scalar>(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)) / Scalar(2);
}

/// Element of SO(3). Construction through from_matrix() checks RᵀR = I and
/// det R = 1; the group operations keep the invariant by construction.
template <typename Scalar>
class Rotation {
 public:
  Rotation() : m_(Matrix3<Scalar>::Identity()) {}

  static Rotation identity() { return Rotation(); }

  /// Throws std::invalid_argument if m is not a proper rotation.
  static Rotation from_matrix(const Matrix3<Scalar>& m,
                              Scalar tol = detail::orthonormality_tolerance<Scalar>()) {
    if (!m.allFinite()) throw std::invalid_argument("rotation has non-finite entries");
    const Scalar ortho = (m.transpose() * m - Matrix3<Scalar>::Identity()).cwiseAbs().maxCoeff();
    const Scalar det = m.determinant();
    if (ortho >= tol || std::abs(det - Scalar(1)) >= tol) {
      throw std::invalid_argument("matrix is not in SO(3): orthonormality error " +
                                  std::to_string(double(ortho)) + ", det " + std::to_string(double(det)));
    }
    return Rotation(m, 0);
  }

  /// No validation; for matrices that are rotations by construction.
  static Rotation unchecked(const Matrix3<Scalar>& m) { return Rotation(m, 0); }

  const Matrix3<Scalar>& matrix() const { return m_; }

  Rotation inverse() const { return Rotation(m_.transpose(), 0); }

  Rotation operator*(const Rotation& other) const { return Rotation(m_ * other.m_, 0); }
  Vector3<Scalar> operator*(const Vector3<Scalar>& v) const { return m_ * v; }

  /// max |RᵀR - I| entry; used to decide when to re-project.
  Scalar orthonormality_error() const {
    return (m_.transpose() * m_ - Matrix3<Scalar>::Identity()).cwiseAbs().maxCoeff();
  }

  template <typename Other>
  Rotation<Other> cast() const {
    return Rotation<Other>::unchecked(m_.template cast<Other>());
  }

 private:
  Rotation(const Matrix3<Scalar>& m, int) : m_(m) {}
  Matrix3<Scalar> m_;
};

/// Element of SE(3) acting on points by x -> R x + t.
template <typename Scalar>
struct RigidTransform {
  Rotation<Scalar> rotation;
  Vector3<Scalar> translation = Vector3<Scalar>::Zero();

  static RigidTransform identity() { return {}; }

  RigidTransform operator*(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  RigidTransform inverse() const {
    const Rotation<Scalar> inv = rotation.inverse();
    return {inv, -(inv * translation)};
  }

  Vector3<Scalar> act(const Vector3<Scalar>& x) const { return rotation * x + translation; }

  template <typename Other>
  RigidTransform<Other> cast() const {
    return {rotation.template cast<Other>(), translation.template cast<Other>()};
  }
};

/// Element of se(3) = so(3) x R^3.
template <typename Scalar>
struct TangentVector {
  Vector3<Scalar> rotational = Vector3<Scalar>::Zero();
  Vector3<Scalar> translational = Vector3<Scalar>::Zero();

  bool all_finite() const { return rotational.allFinite() && translational.allFinite(); }
};

template <typename Scalar>
[[nodiscard]] Rotation<Scalar> so3_exp(const AxisAngle<Scalar>& omega) {
  if (!omega.allFinite()) throw std::invalid_argument("so3_exp: non-finite axis-angle");
  const Scalar theta_sq = omega.squaredNorm();
  const Scalar theta = std::sqrt(theta_sq);
  const Matrix3<Scalar> k = hat(omega);
  Scalar a;
  Scalar b;
  if (theta < detail::small_angle<Scalar>()) {
    a = Scalar(1) - theta_sq / Scalar(6);
    b = Scalar(0.5) - theta_sq / Scalar(24);
  } else {
    a = std::sin(theta) / theta;
    b = (Scalar(1) - std::cos(theta)) / theta_sq;
  }
  return Rotation<Scalar>::unchecked(Matrix3<Scalar>::Identity() + a * k + b * k * k);
}

/// Principal-branch logarithm, |result| <= pi.
template <typename Scalar>
[[nodiscard]] AxisAngle<Scalar> so3_log(const Rotation<Scalar>& r) {
  const Matrix3<Scalar>& m = r.matrix();
  if (!m.allFinite()) throw std::invalid_argument("so3_log: non-finite rotation");
  const Vector3<Scalar> skew = vee(m);  // sin(theta) * axis
  const Scalar cos_theta = std::clamp((m.trace() - Scalar(1)) / Scalar(2), Scalar(-1), Scalar(1));
  const Scalar sin_theta = skew.norm();

  if (cos_theta < detail::near_pi_cos<Scalar>()) {
    // Axis from the dominant eigenvector of (sym(R) + I) / 2 = cos²(θ/2) I + sin²(θ/2) aaᵀ.
    const Matrix3<Scalar> sym = (m + m.transpose()) / Scalar(2);
    Eigen::SelfAdjointEigenSolver<Matrix3<Scalar>> solver((sym + Matrix3<Scalar>::Identity()) / Scalar(2));
    Vector3<Scalar> axis = solver.eigenvectors().col(2);
    Scalar signed_sin = axis.dot(skew);
    if (signed_sin < Scalar(0)) {
      axis = -axis;
      signed_sin = -signed_sin;
    }
    return axis * std::atan2(signed_sin, cos_theta);
  }

  const Scalar theta = std::atan2(sin_theta, cos_theta);
  if (theta < detail::small_angle<Scalar>()) {
    return skew * (Scalar(1) + theta * theta / Scalar(6));
  }
  return skew * (theta / sin_theta);
}

/// log_{from}(to) := so3_log(fromᵀ to), the body-frame residual. Moving along
/// it from `from` by right multiplication reaches `to`.
template <typename Scalar>
[[nodiscard]] AxisAngle<Scalar> relative_log(const Rotation<Scalar>& r_from, const Rotation<Scalar>& r_to) {
  return so3_log(r_from.inverse() * r_to);
}

/// Moves r by a body-frame tangent: r * exp(omega).
template <typename Scalar>
[[nodiscard]] Rotation<Scalar> exp_transport(const Rotation<Scalar>& r, const AxisAngle<Scalar>& omega) {
  return r * so3_exp(omega);
}

template <typename Scalar>
[[nodiscard]] Rotation<Scalar> geodesic_rotation(const Rotation<Scalar>& r0, const Rotation<Scalar>& r1, Scalar t) {
  if (!(t >= Scalar(0) && t <= Scalar(1))) {
    throw std::domain_error("geodesic_rotation: t must lie in [0, 1]");
  }
  if (t == Scalar(1)) return r1;
  return exp_transport(r0, AxisAngle<Scalar>(t * relative_log(r0, r1)));
}

template <typename Scalar>
[[nodiscard]] Vector3<Scalar> lerp_translation(const Vector3<Scalar>& b0, const Vector3<Scalar>& b1, Scalar t) {
  if (!b0.allFinite() || !b1.allFinite() || !std::isfinite(t)) {
    throw std::invalid_argument("lerp_translation: non-finite input");
  }
  return (Scalar(1) - t) * b0 + t * b1;
}

/// Geodesic angle in radians between two rotations.
template <typename Scalar>
[[nodiscard]] Scalar rotation_angle(const Rotation<Scalar>& a, const Rotation<Scalar>& b) {
  return relative_log(a, b).norm();
}

/// Nearest rotation in Frobenius norm (polar factor via SVD).
template <typename Scalar>
[[nodiscard]] Rotation<Scalar> project_to_so3(const Matrix3<Scalar>& m) {
  Eigen::JacobiSVD<Matrix3<Scalar>> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3<Scalar> d = Matrix3<Scalar>::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < Scalar(0)) d(2, 2) = Scalar(-1);
  return Rotation<Scalar>::unchecked(svd.matrixU() * d * svd.matrixV().transpose());
}

/// Haar-uniform rotation from a normalized 4-D Gaussian quaternion.
template <typename Scalar, typename Rng>
[[nodiscard]] Rotation<Scalar> sample_uniform_rotation(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Vector4d q;
  do {
    for (int i = 0; i < 4; ++i) q[i] = normal(rng);
  } while (q.norm() < 1e-12);
  q.normalize();
  const Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
  return Rotation<Scalar>::unchecked(quat.toRotationMatrix().template cast<Scalar>());
}

/// Draws from p0 = U(SO(3)) x N(0, I3).
template <typename Scalar, typename Rng>
[[nodiscard]] RigidTransform<Scalar> sample_initial_pose(Rng& rng) {
  RigidTransform<Scalar> g;
  g.rotation = sample_uniform_rotation<Scalar>(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int i = 0; i < 3; ++i) g.translation[i] = Scalar(normal(rng));
  return g;
}

/// Positions get R x + t, direction channels (normals) get R x.
template <typename Scalar>
[[nodiscard]] std::pair<PointMatrix<Scalar>, PointMatrix<Scalar>> apply_transform(const RigidTransform<Scalar>& g,
                                                                                 const PointMatrix<Scalar>& points,
                                                                                 const PointMatrix<Scalar>& vectors) {
  if (points.rows() != vectors.rows()) {
    throw std::invalid_argument("apply_transform: " + std::to_string(points.rows()) + " points but " +
                                std::to_string(vectors.rows()) + " vectors");
  }
  const Matrix3<Scalar>& r = g.rotation.matrix();
  PointMatrix<Scalar> p = points * r.transpose();
  p.rowwise() += g.translation.transpose();
  PointMatrix<Scalar> v = vectors * r.transpose();
  return {std::move(p), std::move(v)};
}

/// Positions only.
template <typename Scalar>
[[nodiscard]] PointMatrix<Scalar> transform_points(const RigidTransform<Scalar>& g, const PointMatrix<Scalar>& points) {
  PointMatrix<Scalar> p = points * g.rotation.matrix().transpose();
  p.rowwise() += g.translation.transpose();
  return p;
}

}  // namespace em3rf

#endif  // EM3RF_LIEGROUP_HPP
