// Soft voxel occupancy, pairwise soft IoU and the no-overlap penalty.

#ifndef EM3RF_OVERLAP_HPP
#define EM3RF_OVERLAP_HPP

#include "em3rf/fragments.hpp"
#include "em3rf/tensor/ops.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace em3rf {

struct GridSpec {
  Vector3<double> origin = Vector3<double>::Zero();
  double cell_size = 1;
  std::array<tensor::Index, 3> extents{0, 0, 0};

  tensor::Index cell_count() const { return extents[0] * extents[1] * extents[2]; }
  Vector3<double> center(tensor::Index i, tensor::Index j, tensor::Index k) const;
  bool operator==(const GridSpec& other) const = default;
};

struct OverlapConfig {
  int resolution = 32;
  /// Relative padding of the joint bounding box.
  double margin = 0.1;
  /// Kernel width in cells.
  double sigma_cells = 1.5;
  double eps = 1e-6;
};

/// Cubic cells sized so that the padded diameter of the joint bounding sphere (about the centroid)
/// spans `resolution` cells; the grid covers the padded bounding box plus ceil(3 sigma) cells per side.
GridSpec fit_grid(const std::vector<Points>& clouds, const OverlapConfig& config = {});

/// Smallest whole-cell enlargement of `spec` (same cell size, lattice kept) that contains every point.
GridSpec expand_to_cover(const GridSpec& spec, const Points& points);

template <typename Scalar>
struct OccupancyGrid {
  GridSpec spec;
  /// Shape [nx, ny, nz], values in [0, 1].
  tensor::Tensor<Scalar> values;
};

/// M(x) = 1 − Π_p (1 − k(‖x − p‖)), with k a Gaussian of width sigma cut
/// off at 3 sigma and shifted so that it reaches zero continuously there.
/// Points outside the grid expand it (see expand_to_cover); the returned
/// spec is the one actually used. Differentiable with respect to `points` [N, 3].
template <typename Scalar>
OccupancyGrid<Scalar> voxelize(const tensor::Tensor<Scalar>& points, const GridSpec& spec, double sigma);

/// Σ min(M_i, M_j) / (Σ max(M_i, M_j) + eps). Throws std::invalid_argument on a frame mismatch.
template <typename Scalar>
tensor::Tensor<Scalar> soft_iou(const OccupancyGrid<Scalar>& mi, const OccupancyGrid<Scalar>& mj, double eps = 1e-6);

/// Mean soft IoU over unordered pairs of world-frame point sets, voxelized on a
/// shared grid fit to their (detached) joint bounding box. Zero for fewer than two sets.
template <typename Scalar>
tensor::Tensor<Scalar> no_overlap_loss(const std::vector<tensor::Tensor<Scalar>>& world_points,
                                       const OverlapConfig& config = {});

/// Convenience form on fragments and poses, evaluated in double.
double no_overlap_loss(const std::vector<Points>& local_points, const std::vector<Pose>& poses,
                       const OverlapConfig& config = {});

/// Pairwise IoU matrix (symmetric, zero diagonal) on a shared grid.
std::vector<std::vector<double>> pairwise_iou(const std::vector<Points>& world_points, const OverlapConfig& config = {});

/// Writes `<stem>.bin` (float64, x-major then y then z) and `<stem>.json` (origin, cell_size, extents).
void write_grid_dump(const std::filesystem::path& stem, const OccupancyGrid<double>& grid);
OccupancyGrid<double> read_grid_dump(const std::filesystem::path& stem);

}  // namespace em3rf

#endif  // EM3RF_OVERLAP_HPP
