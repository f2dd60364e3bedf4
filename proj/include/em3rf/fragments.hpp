// Fragment data model, PLY ingestion, point sampling, synthetic fracture
// generation and fracture-boundary labeling.

#ifndef EM3RF_FRAGMENTS_HPP
#define EM3RF_FRAGMENTS_HPP

#include "em3rf/liegroup.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace em3rf {

using Points = PointMatrix<double>;
using Pose = RigidTransform<double>;

/// A colored point cloud with normals. Positions are centered once the
/// fragment has gone through center_fragment().
struct Fragment {
  Points positions;
  Points normals;
  Points colors;  // RGB in [0, 1]
  std::optional<std::vector<std::uint8_t>> boundary_label;
  /// Bounding radius of the source object before it was normalized to unit radius.
  double scale = 1.0;
  bool colors_defaulted = false;
  bool normals_estimated = false;

  Eigen::Index size() const { return positions.rows(); }

  /// Rows selected by `index`, labels included.
  Fragment subset(const std::vector<Eigen::Index>& index) const;
};

/// M centered fragments and, for training data, the poses that place each
/// one in the assembled frame.
struct UnassembledObject {
  std::vector<Fragment> fragments;
  std::optional<std::vector<Pose>> gt_poses;
  std::string shape;
  std::uint64_t seed = 0;

  std::size_t size() const { return fragments.size(); }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// PLY

enum class PlyFormat { ascii, binary_little_endian };

/// Reads x,y,z with optional nx,ny,nz and red,green,blue (uchar or float).
/// Missing normals are estimated from 16 nearest neighbours, missing colors
/// default to 0.5 gray with colors_defaulted set.
Fragment load_ply(const std::filesystem::path& path);

void save_ply(const std::filesystem::path& path, const Fragment& f, PlyFormat format = PlyFormat::binary_little_endian);

/// PCA normals over k nearest neighbours, oriented away from the centroid.
Points estimate_normals(const Points& positions, int k = 16);

// ---------------------------------------------------------------------------
// Centering and sampling

/// Returns the fragment translated so its centroid is at the origin, and
/// the centroid that was removed.
std::pair<Fragment, Vector3<double>> center_fragment(const Fragment& f);

/// Farthest-point sampling of n points. Starts from the point farthest from
/// the centroid; the seed only decides ties.
std::vector<Eigen::Index> farthest_point_indices(const Points& positions, Eigen::Index n, std::uint64_t seed);

Fragment sample_points(const Fragment& f, Eigen::Index n, std::uint64_t seed);

/// Splits n_total across fragments proportionally to their point counts
/// (largest remainder), then samples each with FPS.
std::vector<Fragment> sample_object_points(const std::vector<Fragment>& fragments, Eigen::Index n_total,
                                           std::uint64_t seed);

/// Per-fragment counts used by sample_object_points.
std::vector<Eigen::Index> proportional_counts(const std::vector<Eigen::Index>& sizes, Eigen::Index n_total);

// ---------------------------------------------------------------------------
// Synthetic fractures

enum class PrimitiveShape { cube, sphere, cylinder, fresco_slab };

PrimitiveShape parse_shape(const std::string& name);
std::string shape_name(PrimitiveShape shape);

struct FractureSpec {
  PrimitiveShape shape = PrimitiveShape::cube;
  int fragments = 2;
  /// Points per object after FPS down-sampling.
  Eigen::Index points = 5000;
  /// Dense pre-sampling factor relative to `points`.
  double oversample = 2.5;
  /// Physical bounding radius recorded as Fragment::scale.
  double scale = 1.0;
  /// Minimum share of points per fragment.
  double min_fraction = 0.05;
};

/// Cuts a unit-radius primitive with fragments-1 random planes (each plane
/// splits the currently largest piece), paints a smooth color field
/// continuous across cuts and returns centered fragments whose gt_poses
/// place them back. Poses carry identity rotations; see perturb().
UnassembledObject generate_fracture(const FractureSpec& spec, std::uint64_t seed);

/// Value noise color field used by the generator: 3 octaves, RGB in [0, 1].
Vector3<double> color_field(const Vector3<double>& x, std::uint64_t seed);

/// Points of each fragment placed in the assembled frame.
std::vector<Points> assembled_positions(const UnassembledObject& obj);

/// Point i of fragment a gets label 1 iff some point of another fragment is
/// within tau in the assembled frame.
std::vector<std::vector<std::uint8_t>> label_fracture_boundary(const UnassembledObject& obj, double tau);

/// Re-centers and rotates every fragment by a Haar-uniform rotation;
/// gt_poses are updated so they still reassemble the object.
template <typename Rng>
UnassembledObject perturb(const UnassembledObject& obj, Rng& rng);

/// Applies a given rotation to every fragment with matching gt_pose bookkeeping.
UnassembledObject rotate_fragments(const UnassembledObject& obj, const std::vector<Rotation<double>>& rotations);

template <typename Rng>
UnassembledObject perturb(const UnassembledObject& obj, Rng& rng) {
  if (!obj.gt_poses) throw DataError("perturb: object has no ground-truth poses");
  std::vector<Rotation<double>> rotations;
  for (std::size_t i = 0; i < obj.size(); ++i) rotations.push_back(sample_uniform_rotation<double>(rng));
  return rotate_fragments(obj, rotations);
}

// ---------------------------------------------------------------------------
// Object manifests

/// Writes <dir>/<name>_fragK.ply for each fragment and <dir>/<name>.json.
std::filesystem::path write_object(const std::filesystem::path& dir, const std::string& name,
                                   const UnassembledObject& obj);

UnassembledObject read_object(const std::filesystem::path& manifest);

/// All manifests (*.json) in a dataset directory, sorted by name.
std::vector<std::filesystem::path> list_manifests(const std::filesystem::path& dir);

}  // namespace em3rf

#endif  // EM3RF_FRAGMENTS_HPP
