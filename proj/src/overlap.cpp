#include "em3rf/overlap.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <fstream>

namespace em3rf {

using tensor::Index;
namespace ts = tensor;

Vector3<double> GridSpec::center(Index i, Index j, Index k) const {
  return origin + cell_size * Vector3<double>(double(i) + 0.5, double(j) + 0.5, double(k) + 0.5);
}

GridSpec fit_grid(const std::vector<Points>& clouds, const OverlapConfig& config) {
  if (config.resolution < 1 || config.margin < 0) throw std::invalid_argument("fit_grid: bad resolution or margin");
  Vector3<double> lo = Vector3<double>::Constant(std::numeric_limits<double>::infinity());
  Vector3<double> hi = -lo;
  for (const auto& c : clouds)
    for (Index i = 0; i < c.rows(); ++i) {
      lo = lo.cwiseMin(c.row(i).transpose());
      hi = hi.cwiseMax(c.row(i).transpose());
    }
  GridSpec spec;
  const Index res = config.resolution;
  if (!(lo.array() <= hi.array()).all()) {
    spec.cell_size = 1.0 / double(res);
    spec.origin = Vector3<double>::Constant(-0.5);
    spec.extents = {res, res, res};
    return spec;
  }
  Vector3<double> centroid = Vector3<double>::Zero();
  Index count = 0;
  for (const auto& c : clouds) {
    centroid += c.colwise().sum().transpose();
    count += c.rows();
  }
  centroid /= double(count);
  double radius = 0;
  for (const auto& c : clouds)
    for (Index i = 0; i < c.rows(); ++i) radius = std::max(radius, (c.row(i).transpose() - centroid).norm());
  // The cell size follows the bounding sphere, so a rigid motion of the scene leaves it unchanged.
  double diameter = 2 * radius * (1 + config.margin);
  if (diameter < 1e-9) diameter = 1.0;
  spec.cell_size = diameter / double(res);
  const Vector3<double> side = (hi - lo) * (1 + config.margin);
  // Extra cells on each side hold the kernel tails, which would otherwise be clipped unevenly.
  const Index pad = Index(std::ceil(3 * config.sigma_cells));
  for (int a = 0; a < 3; ++a)
    spec.extents[a] = std::clamp<Index>(Index(std::ceil(side[a] / spec.cell_size - 1e-9)), 1, res) + 2 * pad;
  const Vector3<double> mid = 0.5 * (lo + hi);
  for (int a = 0; a < 3; ++a) spec.origin[a] = mid[a] - 0.5 * spec.cell_size * double(spec.extents[a]);
  return spec;
}

GridSpec expand_to_cover(const GridSpec& spec, const Points& points) {
  GridSpec out = spec;
  if (points.rows() == 0) return out;
  const Vector3<double> lo = points.colwise().minCoeff().transpose();
  const Vector3<double> hi = points.colwise().maxCoeff().transpose();
  for (int a = 0; a < 3; ++a) {
    const Index first = Index(std::floor((lo[a] - spec.origin[a]) / spec.cell_size));
    const Index last = Index(std::floor((hi[a] - spec.origin[a]) / spec.cell_size));
    const Index shift = std::max<Index>(0, -first);
    out.origin[a] -= double(shift) * spec.cell_size;
    out.extents[a] = std::max(spec.extents[a], last + 1) + shift;
  }
  return out;
}

namespace {

template <typename Scalar>
Points to_points(const ts::Tensor<Scalar>& t) {
  if (t.rank() != 2 || t.dim(1) != 3) throw ts::ShapeError("expected points [N, 3], got " + ts::to_string(t.shape()));
  Points p(t.dim(0), 3);
  for (Index i = 0; i < t.dim(0); ++i)
    for (int k = 0; k < 3; ++k) p(i, k) = double(t.values()[i * 3 + k]);
  return p;
}

struct Kernel {
  double sigma, radius2, floor_value, inv_two_sigma2, scale;
  explicit Kernel(double s)
      : sigma(s),
        radius2(9 * s * s),
        floor_value(std::exp(-4.5)),
        inv_two_sigma2(1.0 / (2 * s * s)),
        scale(1.0 / (1.0 - std::exp(-4.5))) {}
  // Value and derivative with respect to the squared distance, given g = exp(−d²/2σ²).
  std::pair<double, double> operator()(double g) const {
    const double k = std::min((g - floor_value) * scale, 1.0 - 1e-12);
    return {k, -g * inv_two_sigma2 * scale};
  }
};

// Calls f(cell_index, g, diff = p − center) for every cell within the kernel support of p.
// The Gaussian factorizes over the axes, so only 3 short exp tables are needed per point.
template <typename F>
void for_support(const GridSpec& spec, const Kernel& kernel, const Vector3<double>& p, F&& f) {
  const double r = 3 * kernel.sigma;
  Index lo[3], hi[3];
  std::array<std::vector<double>, 3> d, e;
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max<Index>(0, Index(std::floor((p[a] - r - spec.origin[a]) / spec.cell_size - 0.5)));
    hi[a] = std::min<Index>(spec.extents[a] - 1, Index(std::ceil((p[a] + r - spec.origin[a]) / spec.cell_size - 0.5)));
    for (Index i = lo[a]; i <= hi[a]; ++i) {
      const double x = p[a] - (spec.origin[a] + spec.cell_size * (double(i) + 0.5));
      d[a].push_back(x);
      e[a].push_back(std::exp(-x * x * kernel.inv_two_sigma2));
    }
  }
  const Index ny = spec.extents[1], nz = spec.extents[2];
  for (Index i = lo[0]; i <= hi[0]; ++i) {
    const double dx = d[0][i - lo[0]], ex = e[0][i - lo[0]];
    for (Index j = lo[1]; j <= hi[1]; ++j) {
      const double dy = d[1][j - lo[1]], exy = ex * e[1][j - lo[1]];
      const double dxy2 = dx * dx + dy * dy;
      if (dxy2 >= kernel.radius2) continue;
      for (Index k = lo[2]; k <= hi[2]; ++k) {
        const double dz = d[2][k - lo[2]];
        if (dxy2 + dz * dz < kernel.radius2) f((i * ny + j) * nz + k, exy * e[2][k - lo[2]], Vector3<double>(dx, dy, dz));
      }
    }
  }
}

}  // namespace

template <typename Scalar>
OccupancyGrid<Scalar> voxelize(const ts::Tensor<Scalar>& points, const GridSpec& requested, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("voxelize: sigma must be positive");
  if (requested.cell_size <= 0) throw std::invalid_argument("voxelize: cell size must be positive");
  const Points p = to_points(points);
  const GridSpec spec = expand_to_cover(requested, p);
  const Kernel kernel(sigma);
  const Index cells = spec.cell_count();

  auto log_free = std::make_shared<std::vector<double>>(static_cast<std::size_t>(cells), 0.0);
  for (Index n = 0; n < p.rows(); ++n) {
    for_support(spec, kernel, p.row(n).transpose(), [&](Index c, double g, const Vector3<double>&) {
      (*log_free)[c] += std::log1p(-kernel(g).first);
    });
  }
  std::vector<Scalar> m(static_cast<std::size_t>(cells));
  for (Index c = 0; c < cells; ++c) m[c] = Scalar(-std::expm1((*log_free)[c]));

  auto out = ts::make_result<Scalar>(
      "voxelize", {spec.extents[0], spec.extents[1], spec.extents[2]}, std::move(m), {points},
      [p, spec, kernel, log_free](ts::Node<Scalar>& self) {
        auto& parent = *self.parents[0];
        parent.ensure_grad();
        for (Index n = 0; n < p.rows(); ++n) {
          Vector3<double> grad = Vector3<double>::Zero();
          for_support(spec, kernel, p.row(n).transpose(), [&](Index c, double g, const Vector3<double>& diff) {
            const auto [k, dk] = kernel(g);
            // dM/dk_p is the product of the other points' free factors.
            const double others = std::exp((*log_free)[c] - std::log1p(-k));
            grad += double(self.grad[c]) * others * dk * 2.0 * diff;
          });
          for (int a = 0; a < 3; ++a) parent.grad[n * 3 + a] += Scalar(grad[a]);
        }
      });
  return {spec, out};
}

template <typename Scalar>
ts::Tensor<Scalar> soft_iou(const OccupancyGrid<Scalar>& mi, const OccupancyGrid<Scalar>& mj, double eps) {
  if (!(mi.spec == mj.spec)) throw std::invalid_argument("soft_iou: occupancy grids are in different frames");
  const auto inter = ts::sum(ts::minimum(mi.values, mj.values));
  const auto uni = ts::add_scalar(ts::sum(ts::maximum(mi.values, mj.values)), Scalar(eps));
  return ts::div(inter, uni);
}

template <typename Scalar>
ts::Tensor<Scalar> no_overlap_loss(const std::vector<ts::Tensor<Scalar>>& world_points, const OverlapConfig& config) {
  const std::size_t m = world_points.size();
  if (m < 2) return ts::Tensor<Scalar>::scalar(Scalar(0));
  std::vector<Points> detached;
  for (const auto& t : world_points) detached.push_back(to_points(t));
  const GridSpec spec = fit_grid(detached, config);
  const double sigma = config.sigma_cells * spec.cell_size;
  std::vector<OccupancyGrid<Scalar>> grids;
  for (const auto& t : world_points) grids.push_back(voxelize(t, spec, sigma));
  ts::Tensor<Scalar> total = ts::Tensor<Scalar>::scalar(Scalar(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) total = ts::add(total, soft_iou(grids[i], grids[j], config.eps));
  return ts::scale(total, Scalar(2.0 / double(m * (m - 1))));
}

namespace {

ts::Tensor<double> as_tensor(const Points& p) {
  return ts::Tensor<double>::from_data({p.rows(), 3}, std::vector<double>(p.data(), p.data() + p.size()));
}

}  // namespace

double no_overlap_loss(const std::vector<Points>& local_points, const std::vector<Pose>& poses,
                       const OverlapConfig& config) {
  if (local_points.size() != poses.size()) throw std::invalid_argument("no_overlap_loss: one pose per fragment");
  std::vector<ts::Tensor<double>> world;
  for (std::size_t i = 0; i < poses.size(); ++i) world.push_back(as_tensor(transform_points(poses[i], local_points[i])));
  return no_overlap_loss(world, config).item();
}

std::vector<std::vector<double>> pairwise_iou(const std::vector<Points>& world_points, const OverlapConfig& config) {
  const std::size_t m = world_points.size();
  std::vector<std::vector<double>> iou(m, std::vector<double>(m, 0.0));
  const GridSpec spec = fit_grid(world_points, config);
  std::vector<OccupancyGrid<double>> grids;
  for (const auto& p : world_points) grids.push_back(voxelize(as_tensor(p), spec, config.sigma_cells * spec.cell_size));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) iou[i][j] = iou[j][i] = soft_iou(grids[i], grids[j], config.eps).item();
  return iou;
}

void write_grid_dump(const std::filesystem::path& stem, const OccupancyGrid<double>& grid) {
  std::filesystem::path bin = stem, meta = stem;
  bin += ".bin";
  meta += ".json";
  std::ofstream b(bin, std::ios::binary);
  if (!b) throw std::runtime_error("cannot write " + bin.string());
  b.write(reinterpret_cast<const char*>(grid.values.values().data()),
          static_cast<std::streamsize>(grid.values.values().size() * sizeof(double)));
  const auto& s = grid.spec;
  nlohmann::json j = {{"origin", {s.origin[0], s.origin[1], s.origin[2]}},
                      {"cell_size", s.cell_size},
                      {"extents", {s.extents[0], s.extents[1], s.extents[2]}},
                      {"dtype", "float64"},
                      {"order", "x-major"}};
  std::ofstream(meta) << j.dump(2) << "\n";
}

OccupancyGrid<double> read_grid_dump(const std::filesystem::path& stem) {
  std::filesystem::path bin = stem, meta = stem;
  bin += ".bin";
  meta += ".json";
  std::ifstream m(meta);
  if (!m) throw std::runtime_error("cannot read " + meta.string());
  const auto j = nlohmann::json::parse(m);
  GridSpec s;
  for (int a = 0; a < 3; ++a) {
    s.origin[a] = j.at("origin").at(a).get<double>();
    s.extents[a] = j.at("extents").at(a).get<Index>();
  }
  s.cell_size = j.at("cell_size").get<double>();
  std::vector<double> v(static_cast<std::size_t>(s.cell_count()));
  std::ifstream b(bin, std::ios::binary);
  if (!b.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw std::runtime_error("truncated grid dump " + bin.string());
  return {s, ts::Tensor<double>::from_data({s.extents[0], s.extents[1], s.extents[2]}, std::move(v))};
}

#define EM3RF_INSTANTIATE(S)                                                                          \
  template OccupancyGrid<S> voxelize(const ts::Tensor<S>&, const GridSpec&, double);                  \
  template ts::Tensor<S> soft_iou(const OccupancyGrid<S>&, const OccupancyGrid<S>&, double);          \
  template ts::Tensor<S> no_overlap_loss(const std::vector<ts::Tensor<S>>&, const OverlapConfig&);

EM3RF_INSTANTIATE(float)
EM3RF_INSTANTIATE(double)

#undef EM3RF_INSTANTIATE

}  // namespace em3rf
