#include "test_main.hpp"

#include "em3rf/fragments.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace em3rf;
namespace fs = std::filesystem;
using Eigen::Index;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("em3rf_test_fragments_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Brute-force symmetric squared Chamfer distance.
double chamfer(const Points& a, const Points& b) {
  auto one_way = [](const Points& x, const Points& y) {
    double acc = 0;
    for (Index i = 0; i < x.rows(); ++i) acc += (y.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff();
    return acc / double(x.rows());
  };
  return one_way(a, b) + one_way(b, a);
}

Points stack(const std::vector<Points>& parts) {
  Index n = 0;
  for (const auto& p : parts) n += p.rows();
  Points out(n, 3);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
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
    f.positions.row(i) << g(rng), g(rng), g(rng);
    Eigen::RowVector3d v(g(rng), g(rng), g(rng));
    f.normals.row(i) = v.normalized();
    f.colors.row(i) << u(rng), u(rng), u(rng);
  }
  return f;
}

}  // namespace

TEST_CASE("load_ply: minimal ASCII file") {
  const auto dir = scratch("ascii");
  write_text(dir / "tri.ply",
             "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n"
             "property float nx\nproperty float ny\nproperty float nz\n"
             "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
             "0 0 0 0 0 1 255 0 0\n1 0 0 0 0 1 0 255 0\n0 1 0 0 0 1 0 0 255\n");
  const Fragment f = load_ply(dir / "tri.ply");
  CHECK(f.size() == 3);
  CHECK(f.positions(1, 0) == 1.0);
  CHECK(f.colors(0, 0) == 1.0);
  CHECK(f.colors(2, 2) == 1.0);
  CHECK_FALSE(f.colors_defaulted);
  CHECK_FALSE(f.normals_estimated);
}

TEST_CASE("load_ply: missing colors default to gray and missing normals are estimated") {
  const auto dir = scratch("gray");
  std::string body = "ply\nformat ascii 1.0\nelement vertex 40\nproperty double x\nproperty double y\n"
                     "property double z\nend_header\n";
  // Points on the plane z = 0.
  for (int i = 0; i < 40; ++i) body += std::to_string(i % 7 * 0.1) + " " + std::to_string(i / 7 * 0.1) + " 0\n";
  write_text(dir / "plane.ply", body);
  const Fragment f = load_ply(dir / "plane.ply");
  CHECK(f.colors_defaulted);
  CHECK(f.normals_estimated);
  CHECK((f.colors.array() == 0.5).all());
  for (Index i = 0; i < f.size(); ++i) {
    CHECK(std::abs(f.normals.row(i).norm() - 1) < 1e-4);
    CHECK(std::abs(std::abs(f.normals(i, 2)) - 1) < 1e-6);
  }
}

TEST_CASE("load_ply: errors carry line context") {
  const auto dir = scratch("errors");
  write_text(dir / "bad.ply", "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nbogus line\nend_header\n");
  try {
    (void)load_ply(dir / "bad.ply");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bad.ply:5") != std::string::npos);
  }
  write_text(dir / "nan.ply",
             "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
             "end_header\nnan 0 0\n");
  CHECK_THROWS_AS((void)load_ply(dir / "nan.ply"), DataError);
  CHECK_THROWS_AS((void)load_ply(dir / "missing.ply"), DataError);
}

TEST_CASE("PLY binary roundtrip is bit-exact on coordinates") {
  const auto dir = scratch("binary");
  const Fragment f = random_fragment(257, 3);
  save_ply(dir / "f.ply", f, PlyFormat::binary_little_endian);
  const Fragment g = load_ply(dir / "f.ply");
  REQUIRE(g.size() == f.size());
  CHECK((g.positions.array() == f.positions.array()).all());
  CHECK((g.normals - f.normals).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((g.colors - f.colors).cwiseAbs().maxCoeff() < 1e-6);

  save_ply(dir / "a.ply", f, PlyFormat::ascii);
  CHECK((load_ply(dir / "a.ply").positions.array() == f.positions.array()).all());
  CHECK_FALSE(g.boundary_label);

  Fragment labeled = f;
  labeled.boundary_label.emplace(f.size());
  for (std::size_t i = 0; i < labeled.boundary_label->size(); i += 3) (*labeled.boundary_label)[i] = 1;
  for (auto format : {PlyFormat::binary_little_endian, PlyFormat::ascii}) {
    save_ply(dir / "l.ply", labeled, format);
    const Fragment h = load_ply(dir / "l.ply");
    REQUIRE(h.boundary_label);
    CHECK(*h.boundary_label == *labeled.boundary_label);
    CHECK((h.positions.array() == f.positions.array()).all());
  }
}

TEST_CASE("center_fragment") {
  Fragment f = random_fragment(100, 4);
  auto [c0, m0] = center_fragment(f);
  CHECK((c0.positions.colwise().mean().array().abs() < 1e-12).all());

  auto [c1, m1] = center_fragment(c0);
  CHECK(m1.norm() < 1e-12);
  CHECK((c1.positions - c0.positions).cwiseAbs().maxCoeff() < 1e-12);

  Fragment shifted = c0;
  shifted.positions.col(0).array() += 5.0;
  auto [c2, m2] = center_fragment(shifted);
  CHECK((m2 - Vector3<double>(5, 0, 0)).norm() < 1e-12);
}

TEST_CASE("sample_points") {
  const Fragment f = random_fragment(50, 5);
  const Fragment all = sample_points(f, 50, 1);
  auto key = [](const Points& p) {
    std::vector<std::array<double, 3>> rows;
    for (Index i = 0; i < p.rows(); ++i) rows.push_back({p(i, 0), p(i, 1), p(i, 2)});
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  CHECK(key(all.positions) == key(f.positions));

  const auto counts = proportional_counts({1000, 3000}, 2000);
  CHECK(std::abs(counts[0] - 500) <= 1);
  CHECK(std::abs(counts[1] - 1500) <= 1);
  CHECK(counts[0] + counts[1] == 2000);

  const auto parts = sample_object_points({random_fragment(1000, 6), random_fragment(3000, 7)}, 2000, 9);
  CHECK(std::abs(parts[0].size() - 500) <= 1);
  CHECK(std::abs(parts[1].size() - 1500) <= 1);

  CHECK(sample_points(f, 20, 3).positions == sample_points(f, 20, 3).positions);
}

TEST_CASE("farthest point sampling matches a brute-force oracle on a cube") {
  // The 8 corners of a unit cube plus a dense cluster around its center.
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  Points pts(208, 3);
  for (int c = 0; c < 8; ++c) pts.row(c) << (c & 1) - 0.5, (c >> 1 & 1) - 0.5, (c >> 2 & 1) - 0.5;
  for (Index i = 8; i < pts.rows(); ++i) pts.row(i) << u(rng), u(rng), u(rng);

  const auto picked = farthest_point_indices(pts, 8, 1);
  REQUIRE(picked.size() == 8);
  for (Index idx : picked) {
    CAPTURE(pts.row(idx));
    CHECK((pts.row(idx).cwiseAbs().array() > 0.49).all());
  }

  // Oracle: greedy max-min over all points, recomputed from scratch each round.
  std::vector<Index> oracle{picked[0]};
  while (oracle.size() < 8) {
    double best = -1;
    Index arg = -1;
    for (Index i = 0; i < pts.rows(); ++i) {
      double d = 1e300;
      for (Index s : oracle) d = std::min(d, (pts.row(i) - pts.row(s)).squaredNorm());
      if (d > best + 1e-12) {
        best = d;
        arg = i;
      }
    }
    oracle.push_back(arg);
  }
  // Ties between equidistant corners may be broken differently; compare as sets.
  auto a = picked, b = oracle;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("generate_fracture: reassembles exactly and is deterministic") {
  for (auto shape : {PrimitiveShape::cube, PrimitiveShape::sphere, PrimitiveShape::cylinder,
                     PrimitiveShape::fresco_slab}) {
    FractureSpec spec;
    spec.shape = shape;
    spec.fragments = shape == PrimitiveShape::cube ? 2 : 3;
    spec.points = 1500;
    const auto obj = generate_fracture(spec, 42);
    CAPTURE(shape_name(shape));
    REQUIRE(obj.size() == std::size_t(spec.fragments));
    Index total = 0;
    for (const auto& f : obj.fragments) {
      total += f.size();
      CHECK((f.positions.colwise().mean().array().abs() < 1e-6).all());
      CHECK((f.colors.array() >= 0).all());
      CHECK((f.colors.array() <= 1).all());
      CHECK((f.normals.rowwise().norm().array() - 1).abs().maxCoeff() < 1e-4);
    }
    CHECK(total == 1500);

    // Reference: the same sampling, placed without going through the centered fragments.
    const auto again = generate_fracture(spec, 42);
    CHECK(chamfer(stack(assembled_positions(obj)), stack(assembled_positions(again))) < 1e-6);
    CHECK(again.fragments[0].positions == obj.fragments[0].positions);
    CHECK(again.fragments[0].colors == obj.fragments[0].colors);
  }
}

TEST_CASE("generate_fracture: two fragments meet on a plane") {
  FractureSpec spec;
  spec.points = 3000;
  const auto obj = generate_fracture(spec, 7);
  const double tau = 0.05;
  const auto labels = label_fracture_boundary(obj, tau);
  const auto placed = assembled_positions(obj);
  std::vector<Eigen::RowVector3d> contact;
  for (std::size_t f = 0; f < 2; ++f)
    for (Index i = 0; i < placed[f].rows(); ++i)
      if (labels[f][i]) contact.push_back(placed[f].row(i));
  REQUIRE(contact.size() > 20);
  Eigen::RowVector3d c = Eigen::RowVector3d::Zero();
  for (auto& p : contact) c += p;
  c /= double(contact.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (auto& p : contact) cov += (p - c).transpose() * (p - c);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const Eigen::Vector3d n = es.eigenvectors().col(0);
  double worst = 0;
  for (auto& p : contact) worst = std::max(worst, std::abs((p - c).dot(n.transpose())));
  CHECK(worst < tau);
}

TEST_CASE("generate_fracture rejects bad fragment counts") {
  FractureSpec spec;
  spec.fragments = 1;
  CHECK_THROWS_AS((void)generate_fracture(spec, 1), std::invalid_argument);
  spec.fragments = 9;
  CHECK_THROWS_AS((void)generate_fracture(spec, 1), std::invalid_argument);
  // Impossible size floor: every cut is rejected.
  spec.fragments = 2;
  spec.points = 200;
  spec.min_fraction = 0.9;
  CHECK_THROWS_AS((void)generate_fracture(spec, 1), DataError);
}

TEST_CASE("label_fracture_boundary matches brute force on two cubes sharing a face") {
  // Two axis-aligned grids of cube surface points, one at x in [-1, 0], the other at [0, 1].
  auto cube = [](double x0) {
    std::vector<Eigen::RowVector3d> rows;
    for (int i = 0; i <= 8; ++i)
      for (int j = 0; j <= 8; ++j)
        for (int k = 0; k <= 8; ++k) {
          if (i % 8 && j % 8 && k % 8) continue;
          rows.emplace_back(x0 + i / 8.0, j / 8.0 - 0.5, k / 8.0 - 0.5);
        }
    Fragment f;
    f.positions.resize(Index(rows.size()), 3);
    for (Index r = 0; r < f.positions.rows(); ++r) f.positions.row(r) = rows[r];
    f.normals = Points::Zero(f.positions.rows(), 3);
    f.normals.col(0).setOnes();
    f.colors = Points::Constant(f.positions.rows(), 3, 0.5);
    return f;
  };
  UnassembledObject obj;
  obj.gt_poses.emplace();
  for (double x0 : {-1.0, 0.0}) {
    auto [f, c] = center_fragment(cube(x0));
    obj.fragments.push_back(f);
    obj.gt_poses->push_back(Pose{Rotation<double>::identity(), c});
  }
  for (double tau : {0.4, 0.0, 0.2}) {
    CAPTURE(tau);
    const auto labels = label_fracture_boundary(obj, tau);
    const auto placed = assembled_positions(obj);
    for (std::size_t f = 0; f < 2; ++f) {
      const auto& other = placed[1 - f];
      for (Index i = 0; i < placed[f].rows(); ++i) {
        const double d = std::sqrt((other.rowwise() - placed[f].row(i)).rowwise().squaredNorm().minCoeff());
        CHECK(labels[f][i] == (d <= tau ? 1 : 0));
      }
    }
    if (tau == 0.4) {
      // Here the oracle reduces to the distance to the shared plane x = 0.
      for (std::size_t f = 0; f < 2; ++f)
        for (Index i = 0; i < placed[f].rows(); ++i)
          CHECK(labels[f][i] == (std::abs(placed[f](i, 0)) <= 0.4 + 1e-12 ? 1 : 0));
    }
  }

  UnassembledObject single;
  single.fragments.push_back(obj.fragments[0]);
  single.gt_poses = std::vector<Pose>{Pose::identity()};
  const auto single_labels = label_fracture_boundary(single, 0.4);
  for (auto v : single_labels[0]) CHECK(v == 0);

  UnassembledObject no_poses;
  no_poses.fragments = obj.fragments;
  CHECK_THROWS_AS((void)label_fracture_boundary(no_poses, 0.4), DataError);
}

TEST_CASE("label_fracture_boundary is symmetric on generated objects") {
  FractureSpec spec;
  spec.fragments = 4;
  spec.points = 2000;
  const auto obj = generate_fracture(spec, 11);
  const auto labels = label_fracture_boundary(obj, 0.1);
  for (std::size_t a = 0; a < obj.size(); ++a) {
    for (std::size_t b = 0; b < obj.size(); ++b) {
      if (a == b) continue;
      bool any = false;
      for (auto v : labels[b]) any = any || v;
      bool a_any = false;
      for (auto v : labels[a]) a_any = a_any || v;
      // Contact is mutual: if a touches anything, something touches a.
      if (a_any) CHECK(any);
    }
  }
}

TEST_CASE("perturb keeps the assembly and rotates normals") {
  FractureSpec spec;
  spec.fragments = 3;
  spec.points = 1200;
  const auto obj = generate_fracture(spec, 13);
  std::mt19937_64 rng(1);
  const auto moved = perturb(obj, rng);
  CHECK(chamfer(stack(assembled_positions(obj)), stack(assembled_positions(moved))) < 1e-6);
  for (std::size_t i = 0; i < obj.size(); ++i) {
    const auto& f = moved.fragments[i];
    CHECK((f.positions.colwise().mean().array().abs() < 1e-6).all());
    // Normals are direction channels: rotating them back by the pose recovers the originals.
    const Matrix3<double> r = (*moved.gt_poses)[i].rotation.matrix();
    const Matrix3<double> r0 = (*obj.gt_poses)[i].rotation.matrix();
    CHECK((f.normals * r.transpose() - obj.fragments[i].normals * r0.transpose()).cwiseAbs().maxCoeff() < 1e-9);
  }
  CHECK_THROWS_AS((void)perturb(UnassembledObject{}, rng), DataError);
}

TEST_CASE("object manifests roundtrip") {
  const auto dir = scratch("manifest");
  FractureSpec spec;
  spec.points = 800;
  std::mt19937_64 rng(3);
  auto obj = perturb(generate_fracture(spec, 5), rng);
  write_object(dir, "obj_000", obj);
  const auto manifests = list_manifests(dir);
  REQUIRE(manifests.size() == 1);
  const auto back = read_object(manifests[0]);
  REQUIRE(back.size() == obj.size());
  CHECK(back.shape == "cube");
  CHECK(back.seed == 5);
  for (std::size_t i = 0; i < obj.size(); ++i) {
    CHECK((back.fragments[i].positions.array() == obj.fragments[i].positions.array()).all());
    CHECK(((*back.gt_poses)[i].rotation.matrix() - (*obj.gt_poses)[i].rotation.matrix()).cwiseAbs().maxCoeff() <
          1e-15);
  }
  const auto first = slurp(manifests[0]);
  write_object(dir, "obj_000", obj);
  CHECK(slurp(manifests[0]) == first);

  write_text(dir / "broken.json", "{\"format\": \"em3rf-object\"");
  CHECK_THROWS_AS((void)read_object(dir / "broken.json"), DataError);
}
