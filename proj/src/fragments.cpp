#include "em3rf/fragments.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <unordered_map>

namespace em3rf {

using Eigen::Index;

Fragment Fragment::subset(const std::vector<Index>& index) const {
  Fragment out;
  const auto n = static_cast<Index>(index.size());
  out.positions.resize(n, 3);
  out.normals.resize(n, 3);
  out.colors.resize(n, 3);
  if (boundary_label) out.boundary_label.emplace(index.size());
  for (Index i = 0; i < n; ++i) {
    const Index src = index[static_cast<std::size_t>(i)];
    out.positions.row(i) = positions.row(src);
    out.normals.row(i) = normals.row(src);
    out.colors.row(i) = colors.row(src);
    if (boundary_label) (*out.boundary_label)[static_cast<std::size_t>(i)] = (*boundary_label)[src];
  }
  out.scale = scale;
  out.colors_defaulted = colors_defaulted;
  out.normals_estimated = normals_estimated;
  return out;
}

Points estimate_normals(const Points& positions, int k) {
  const Index n = positions.rows();
  Points normals(n, 3);
  if (n == 0) return normals;
  const Eigen::RowVector3d centroid = positions.colwise().mean();
  const Index kk = std::min<Index>(k, n);
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) dist[j] = {(positions.row(j) - positions.row(i)).squaredNorm(), j};
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    Eigen::RowVector3d mu = Eigen::RowVector3d::Zero();
    for (Index a = 0; a < kk; ++a) mu += positions.row(dist[a].second);
    mu /= double(kk);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (Index a = 0; a < kk; ++a) {
      const Eigen::RowVector3d d = positions.row(dist[a].second) - mu;
      cov += d.transpose() * d;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
    Eigen::Vector3d nrm = solver.eigenvectors().col(0);
    if (nrm.dot((positions.row(i) - centroid).transpose()) < 0) nrm = -nrm;
    normals.row(i) = nrm.transpose();
  }
  return normals;
}

std::pair<Fragment, Vector3<double>> center_fragment(const Fragment& f) {
  Fragment out = f;
  Vector3<double> c = Vector3<double>::Zero();
  if (f.size() > 0) c = f.positions.colwise().mean().transpose();
  out.positions.rowwise() -= c.transpose();
  return {std::move(out), c};
}

std::vector<Index> farthest_point_indices(const Points& positions, Index n, std::uint64_t seed) {
  const Index total = positions.rows();
  if (n < 1) throw std::invalid_argument("farthest_point_indices: n must be >= 1");
  n = std::min(n, total);
  std::vector<Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const Eigen::RowVector3d centroid = positions.colwise().mean();
  Index start = order[0];
  double best = -1;
  for (Index idx : order) {
    const double d = (positions.row(idx) - centroid).squaredNorm();
    if (d > best) {
      best = d;
      start = idx;
    }
  }
  std::vector<Index> picked{start};
  std::vector<double> min_d(static_cast<std::size_t>(total), std::numeric_limits<double>::infinity());
  Index last = start;
  while (static_cast<Index>(picked.size()) < n) {
    Index arg = -1;
    double far = -1;
    for (Index idx : order) {
      const double d = (positions.row(idx) - positions.row(last)).squaredNorm();
      if (d < min_d[idx]) min_d[idx] = d;
      if (min_d[idx] > far) {
        far = min_d[idx];
        arg = idx;
      }
    }
    picked.push_back(arg);
    last = arg;
  }
  return picked;
}

Fragment sample_points(const Fragment& f, Index n, std::uint64_t seed) {
  return f.subset(farthest_point_indices(f.positions, n, seed));
}

std::vector<Index> proportional_counts(const std::vector<Index>& sizes, Index n_total) {
  const Index mass = std::accumulate(sizes.begin(), sizes.end(), Index{0});
  std::vector<Index> counts(sizes.size(), 0);
  if (mass == 0) return counts;
  n_total = std::min(n_total, mass);
  std::vector<std::pair<double, std::size_t>> remainders;
  Index assigned = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const double exact = double(n_total) * double(sizes[i]) / double(mass);
    counts[i] = std::min<Index>(static_cast<Index>(std::floor(exact)), sizes[i]);
    assigned += counts[i];
    remainders.emplace_back(exact - double(counts[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n_total; k = (k + 1) % remainders.size()) {
    const std::size_t i = remainders[k].second;
    if (counts[i] < sizes[i]) {
      ++counts[i];
      ++assigned;
    }
  }
  return counts;
}

std::vector<Fragment> sample_object_points(const std::vector<Fragment>& fragments, Index n_total, std::uint64_t seed) {
  std::vector<Index> sizes;
  for (const auto& f : fragments) sizes.push_back(f.size());
  const auto counts = proportional_counts(sizes, n_total);
  std::vector<Fragment> out;
  for (std::size_t i = 0; i < fragments.size(); ++i) {
    out.push_back(sample_points(fragments[i], std::max<Index>(counts[i], 1), seed + 7919 * i));
  }
  return out;
}

std::vector<Points> assembled_positions(const UnassembledObject& obj) {
  if (!obj.gt_poses) throw DataError("object has no ground-truth poses");
  std::vector<Points> out;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    out.push_back(transform_points((*obj.gt_poses)[i], obj.fragments[i].positions));
  }
  return out;
}

std::vector<std::vector<std::uint8_t>> label_fracture_boundary(const UnassembledObject& obj, double tau) {
  if (!obj.gt_poses) throw DataError("label_fracture_boundary: object has no ground-truth poses");
  if (tau < 0) throw std::invalid_argument("label_fracture_boundary: tau must be >= 0");
  const auto placed = assembled_positions(obj);
  std::vector<std::vector<std::uint8_t>> labels;
  for (const auto& p : placed) labels.emplace_back(static_cast<std::size_t>(p.rows()), 0);
  if (placed.size() < 2) return labels;

  // Uniform hash grid with cell size >= tau: neighbours are within the 27 adjacent cells.
  const double cell = std::max(tau, 1e-6);
  auto key = [cell](const Eigen::RowVector3d& x, int dx, int dy, int dz) {
    const auto ix = static_cast<std::int64_t>(std::floor(x[0] / cell)) + dx;
    const auto iy = static_cast<std::int64_t>(std::floor(x[1] / cell)) + dy;
    const auto iz = static_cast<std::int64_t>(std::floor(x[2] / cell)) + dz;
    return (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791);
  };
  std::unordered_map<std::int64_t, std::vector<std::pair<std::size_t, Index>>> grid;
  for (std::size_t f = 0; f < placed.size(); ++f)
    for (Index i = 0; i < placed[f].rows(); ++i) grid[key(placed[f].row(i), 0, 0, 0)].emplace_back(f, i);

  const double tau_sq = tau * tau;
  for (std::size_t f = 0; f < placed.size(); ++f) {
    for (Index i = 0; i < placed[f].rows(); ++i) {
      const Eigen::RowVector3d x = placed[f].row(i);
      bool hit = false;
      for (int dx = -1; dx <= 1 && !hit; ++dx)
        for (int dy = -1; dy <= 1 && !hit; ++dy)
          for (int dz = -1; dz <= 1 && !hit; ++dz) {
            auto it = grid.find(key(x, dx, dy, dz));
            if (it == grid.end()) continue;
            for (const auto& [g, j] : it->second) {
              if (g != f && (placed[g].row(j) - x).squaredNorm() <= tau_sq) {
                hit = true;
                break;
              }
            }
          }
      labels[f][static_cast<std::size_t>(i)] = hit ? 1 : 0;
    }
  }
  return labels;
}

UnassembledObject rotate_fragments(const UnassembledObject& obj, const std::vector<Rotation<double>>& rotations) {
  if (!obj.gt_poses) throw DataError("rotate_fragments: object has no ground-truth poses");
  if (rotations.size() != obj.size()) throw std::invalid_argument("rotate_fragments: one rotation per fragment");
  UnassembledObject out = obj;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    auto [centered, c] = center_fragment(obj.fragments[i]);
    const Pose shift{Rotation<double>::identity(), c};
    const Pose spin{rotations[i], Vector3<double>::Zero()};
    auto [p, n] = apply_transform(spin, centered.positions, centered.normals);
    out.fragments[i].positions = std::move(p);
    out.fragments[i].normals = std::move(n);
    // old pose * shift maps the centered fragment; undo the spin on the right.
    (*out.gt_poses)[i] = (*obj.gt_poses)[i] * shift * spin.inverse();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

nlohmann::json pose_json(const Pose& g) {
  nlohmann::json r = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(g.rotation.matrix()(i, j));
  return {{"rotation", r}, {"translation", {g.translation[0], g.translation[1], g.translation[2]}}};
}

Pose pose_from_json(const nlohmann::json& j, const std::string& where) {
  const auto& r = j.at("rotation");
  const auto& t = j.at("translation");
  if (r.size() != 9 || t.size() != 3) throw DataError(where + ": pose needs 9 rotation and 3 translation values");
  Matrix3<double> m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = r[i].get<double>();
  Pose g;
  try {
    g.rotation = Rotation<double>::from_matrix(m);
  } catch (const std::invalid_argument& e) {
    throw DataError(where + ": " + e.what());
  }
  for (int i = 0; i < 3; ++i) g.translation[i] = t[i].get<double>();
  return g;
}

}  // namespace

std::filesystem::path write_object(const std::filesystem::path& dir, const std::string& name,
                                   const UnassembledObject& obj) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "em3rf-object";
  manifest["version"] = 1;
  manifest["shape"] = obj.shape;
  manifest["seed"] = obj.seed;
  manifest["scale"] = obj.fragments.empty() ? 1.0 : obj.fragments.front().scale;
  manifest["fragments"] = nlohmann::json::array();
  for (std::size_t i = 0; i < obj.size(); ++i) {
    const std::string file = name + "_frag" + std::to_string(i) + ".ply";
    save_ply(dir / file, obj.fragments[i]);
    nlohmann::json entry{{"file", file}};
    if (obj.gt_poses) entry.update(pose_json((*obj.gt_poses)[i]));
    manifest["fragments"].push_back(entry);
  }
  const auto path = dir / (name + ".json");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest " + path.string());
  os << manifest.dump(2) << "\n";
  if (!os) throw DataError("write failed for " + path.string());
  return path;
}

UnassembledObject read_object(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw DataError("cannot open manifest " + manifest.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  UnassembledObject obj;
  try {
    obj.shape = j.value("shape", std::string{});
    obj.seed = j.value("seed", std::uint64_t{0});
    const double scale = j.value("scale", 1.0);
    std::vector<Pose> poses;
    bool all_posed = true;
    for (const auto& entry : j.at("fragments")) {
      Fragment f = load_ply(manifest.parent_path() / entry.at("file").get<std::string>());
      f.scale = scale;
      obj.fragments.push_back(std::move(f));
      if (entry.contains("rotation")) {
        poses.push_back(pose_from_json(entry, manifest.string()));
      } else {
        all_posed = false;
      }
    }
    if (all_posed && !poses.empty()) obj.gt_poses = std::move(poses);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  return obj;
}

std::vector<std::filesystem::path> list_manifests(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".json") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace em3rf
