// Randomized equivariance certification of the fragment encoder.
//
// Every geometry layer and the whole branch are checked against
// f((σ, R)·x) = (σ, R)·f(x); the color branch must be bit-identical under
// rotations, and the fused embedding must satisfy both contracts blockwise.

#ifndef EM3RF_CERTIFY_HPP
#define EM3RF_CERTIFY_HPP

#include "em3rf/encoder.hpp"

#include <string>
#include <vector>

namespace em3rf {

/// Applies R to the trailing 3-axis of a [..., 3] tensor.
template <typename Scalar>
tensor::Tensor<Scalar> rotate_trailing(const tensor::Tensor<Scalar>& x, const Matrix3<double>& r);

/// Reorders the leading (point) axis: out[i] = x[perm[i]].
template <typename Scalar>
tensor::Tensor<Scalar> permute_points(const tensor::Tensor<Scalar>& x, const std::vector<tensor::Index>& perm);

/// ‖a − b‖ / max(‖b‖, tiny), Frobenius norms in double.
template <typename Scalar>
double relative_deviation(const tensor::Tensor<Scalar>& a, const tensor::Tensor<Scalar>& b);

/// Random fragment with points in the unit ball, unit normals and colors in [0, 1].
Fragment random_fragment(tensor::Index n, std::uint64_t seed);

struct CertifyOptions {
  int trials = 100;
  tensor::Index points = 64;
  std::uint64_t seed = 0;
  /// Relative tolerance; 0 selects 1e-4 for float and 1e-8 for double.
  double tolerance = 0;
};

struct CertifyCheck {
  std::string name;
  double max_deviation = 0;
  double tolerance = 0;
  bool passed() const { return max_deviation <= tolerance; }
};

struct CertificationReport {
  std::vector<CertifyCheck> checks;
  double seconds = 0;

  bool passed() const;
  /// Name of the first failing geometry layer, else of the first failing check; empty if all pass.
  std::string first_failure() const;
  std::string to_text() const;
};

template <typename Scalar>
CertificationReport certify_encoder(const FragmentEncoder<Scalar>& encoder, const CertifyOptions& options);

}  // namespace em3rf

#endif  // EM3RF_CERTIFY_HPP
