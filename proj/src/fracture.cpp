#include "em3rf/fragments.hpp"

#include <algorithm>
#include <memory>
#include <numbers>

namespace em3rf {

using Eigen::Index;

namespace {

using V3 = Vector3<double>;

struct SurfaceSample {
  std::vector<V3> points;
  std::vector<V3> normals;
};

class Primitive {
 public:
  virtual ~Primitive() = default;
  virtual bool inside(const V3& x) const = 0;
  virtual double area() const = 0;
  virtual void sample_surface(std::mt19937_64& rng, Index n, SurfaceSample& out) const = 0;
  /// Unit vector for a random cut normal.
  virtual V3 cut_normal(std::mt19937_64& rng) const {
    std::normal_distribution<double> g;
    V3 n(g(rng), g(rng), g(rng));
    return n.normalized();
  }
};

class Cube final : public Primitive {
 public:
  bool inside(const V3& x) const override { return x.cwiseAbs().maxCoeff() <= half_; }
  double area() const override { return 24 * half_ * half_; }
  void sample_surface(std::mt19937_64& rng, Index n, SurfaceSample& out) const override {
    std::uniform_int_distribution<int> face(0, 5);
    std::uniform_real_distribution<double> u(-half_, half_);
    for (Index i = 0; i < n; ++i) {
      const int f = face(rng);
      const int axis = f / 2;
      const double sign = f % 2 ? 1.0 : -1.0;
      V3 p(u(rng), u(rng), u(rng));
      p[axis] = sign * half_;
      V3 nrm = V3::Zero();
      nrm[axis] = sign;
      out.points.push_back(p);
      out.normals.push_back(nrm);
    }
  }

 private:
  double half_ = 1.0 / std::sqrt(3.0);
};

class Sphere final : public Primitive {
 public:
  bool inside(const V3& x) const override { return x.squaredNorm() <= 1.0; }
  double area() const override { return 4 * std::numbers::pi; }
  void sample_surface(std::mt19937_64& rng, Index n, SurfaceSample& out) const override {
    std::normal_distribution<double> g;
    for (Index i = 0; i < n; ++i) {
      V3 p;
      do {
        p = V3(g(rng), g(rng), g(rng));
      } while (p.norm() < 1e-9);
      p.normalize();
      out.points.push_back(p);
      out.normals.push_back(p);
    }
  }
};

class Cylinder final : public Primitive {
 public:
  bool inside(const V3& x) const override {
    return x.head<2>().squaredNorm() <= radius_ * radius_ && std::abs(x.z()) <= half_height_;
  }
  double area() const override { return side_area() + 2 * cap_area(); }
  void sample_surface(std::mt19937_64& rng, Index n, SurfaceSample& out) const override {
    std::uniform_real_distribution<double> u(0, 1);
    for (Index i = 0; i < n; ++i) {
      const double pick = u(rng) * area();
      if (pick < side_area()) {
        const double phi = 2 * std::numbers::pi * u(rng);
        const double z = (2 * u(rng) - 1) * half_height_;
        out.points.emplace_back(radius_ * std::cos(phi), radius_ * std::sin(phi), z);
        out.normals.emplace_back(std::cos(phi), std::sin(phi), 0);
      } else {
        const double r = radius_ * std::sqrt(u(rng));
        const double phi = 2 * std::numbers::pi * u(rng);
        const double sign = pick < side_area() + cap_area() ? 1.0 : -1.0;
        out.points.emplace_back(r * std::cos(phi), r * std::sin(phi), sign * half_height_);
        out.normals.emplace_back(0, 0, sign);
      }
    }
  }

 private:
  double side_area() const { return 2 * std::numbers::pi * radius_ * 2 * half_height_; }
  double cap_area() const { return std::numbers::pi * radius_ * radius_; }
  double radius_ = 0.8;
  double half_height_ = 0.6;
};

/// Thin extruded convex polygon standing in for a painted fresco slab.
class FrescoSlab final : public Primitive {
 public:
  explicit FrescoSlab(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> jitter(0.75, 1.0);
    const int sides = 7;
    for (int k = 0; k < sides; ++k) {
      const double phi = 2 * std::numbers::pi * k / sides;
      const double r = jitter(rng);
      verts_.emplace_back(r * std::cos(phi), 0.8 * r * std::sin(phi));
    }
    double reach = 0;
    for (const auto& v : verts_) reach = std::max(reach, v.norm());
    // Scale so the bounding radius (corner of the extrusion) is 1.
    const double s = std::sqrt(1.0 - half_thickness_ * half_thickness_) / reach;
    for (auto& v : verts_) v *= s;
    for (std::size_t k = 0; k < verts_.size(); ++k) {
      const Eigen::Vector2d e = verts_[(k + 1) % verts_.size()] - verts_[k];
      perimeter_ += e.norm();
      poly_area_ += 0.5 * (verts_[k].x() * verts_[(k + 1) % verts_.size()].y() -
                           verts_[(k + 1) % verts_.size()].x() * verts_[k].y());
    }
  }

  bool inside(const V3& x) const override { return std::abs(x.z()) <= half_thickness_ && in_polygon(x.head<2>()); }
  double area() const override { return 2 * poly_area_ + perimeter_ * 2 * half_thickness_; }
  void sample_surface(std::mt19937_64& rng, Index n, SurfaceSample& out) const override {
    std::uniform_real_distribution<double> u(0, 1);
    for (Index i = 0; i < n; ++i) {
      const double pick = u(rng) * area();
      if (pick < 2 * poly_area_) {
        Eigen::Vector2d q;
        do {
          q = Eigen::Vector2d(2 * u(rng) - 1, 2 * u(rng) - 1);
        } while (!in_polygon(q));
        const double sign = pick < poly_area_ ? 1.0 : -1.0;
        out.points.emplace_back(q.x(), q.y(), sign * half_thickness_);
        out.normals.emplace_back(0, 0, sign);
      } else {
        double s = u(rng) * perimeter_;
        std::size_t k = 0;
        Eigen::Vector2d e;
        for (;; k = (k + 1) % verts_.size()) {
          e = verts_[(k + 1) % verts_.size()] - verts_[k];
          if (s <= e.norm()) break;
          s -= e.norm();
        }
        const Eigen::Vector2d q = verts_[k] + e.normalized() * s;
        const double z = (2 * u(rng) - 1) * half_thickness_;
        out.points.emplace_back(q.x(), q.y(), z);
        out.normals.emplace_back(e.y() / e.norm(), -e.x() / e.norm(), 0);
      }
    }
  }
  // Cuts run across the slab, never parallel to its faces.
  V3 cut_normal(std::mt19937_64& rng) const override {
    std::normal_distribution<double> g;
    V3 n(g(rng), g(rng), 0.3 * g(rng));
    return n.normalized();
  }

 private:
  bool in_polygon(const Eigen::Vector2d& q) const {
    for (std::size_t k = 0; k < verts_.size(); ++k) {
      const Eigen::Vector2d e = verts_[(k + 1) % verts_.size()] - verts_[k];
      const Eigen::Vector2d d = q - verts_[k];
      if (e.x() * d.y() - e.y() * d.x() < 0) return false;
    }
    return true;
  }
  std::vector<Eigen::Vector2d> verts_;
  double half_thickness_ = 0.1;
  double perimeter_ = 0;
  double poly_area_ = 0;
};

std::unique_ptr<Primitive> make_primitive(PrimitiveShape shape, std::mt19937_64& rng) {
  switch (shape) {
    case PrimitiveShape::cube:
      return std::make_unique<Cube>();
    case PrimitiveShape::sphere:
      return std::make_unique<Sphere>();
    case PrimitiveShape::cylinder:
      return std::make_unique<Cylinder>();
    case PrimitiveShape::fresco_slab:
      return std::make_unique<FrescoSlab>(rng);
  }
  throw std::invalid_argument("unknown primitive");
}

struct HalfSpace {
  V3 normal;
  double offset;  // keeps points with normal.dot(x) - offset >= 0
  bool contains(const V3& x) const { return normal.dot(x) - offset >= 0; }
};

struct Piece {
  std::vector<HalfSpace> region;
  std::vector<V3> points;
  std::vector<V3> normals;
};

bool in_region(const std::vector<HalfSpace>& region, const V3& x) {
  return std::all_of(region.begin(), region.end(), [&](const HalfSpace& h) { return h.contains(x); });
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double lattice_value(std::int64_t i, std::int64_t j, std::int64_t k, std::uint64_t salt) {
  std::uint64_t h = splitmix64(salt);
  h = splitmix64(h ^ static_cast<std::uint64_t>(i));
  h = splitmix64(h ^ static_cast<std::uint64_t>(j));
  h = splitmix64(h ^ static_cast<std::uint64_t>(k));
  return double(h >> 11) / double(1ULL << 53) * 2.0 - 1.0;
}

double value_noise(const V3& x, std::uint64_t salt) {
  const V3 f = x.array().floor();
  const V3 r = x - f;
  const V3 s = r.array() * r.array() * (3.0 - 2.0 * r.array());
  const auto i0 = static_cast<std::int64_t>(f.x()), j0 = static_cast<std::int64_t>(f.y()),
             k0 = static_cast<std::int64_t>(f.z());
  double acc = 0;
  for (int di = 0; di < 2; ++di)
    for (int dj = 0; dj < 2; ++dj)
      for (int dk = 0; dk < 2; ++dk) {
        const double w = (di ? s.x() : 1 - s.x()) * (dj ? s.y() : 1 - s.y()) * (dk ? s.z() : 1 - s.z());
        acc += w * lattice_value(i0 + di, j0 + dj, k0 + dk, salt);
      }
  return acc;
}

}  // namespace

PrimitiveShape parse_shape(const std::string& name) {
  if (name == "cube") return PrimitiveShape::cube;
  if (name == "sphere") return PrimitiveShape::sphere;
  if (name == "cylinder") return PrimitiveShape::cylinder;
  if (name == "fresco_slab" || name == "slab") return PrimitiveShape::fresco_slab;
  throw std::invalid_argument("unknown shape '" + name + "' (expected cube, sphere, cylinder or fresco_slab)");
}

std::string shape_name(PrimitiveShape shape) {
  switch (shape) {
    case PrimitiveShape::cube:
      return "cube";
    case PrimitiveShape::sphere:
      return "sphere";
    case PrimitiveShape::cylinder:
      return "cylinder";
    case PrimitiveShape::fresco_slab:
      return "fresco_slab";
  }
  return "unknown";
}

Vector3<double> color_field(const Vector3<double>& x, std::uint64_t seed) {
  V3 rgb;
  for (int c = 0; c < 3; ++c) {
    double n = 0, amp = 1, freq = 1.3, norm = 0;
    for (int octave = 0; octave < 3; ++octave) {
      n += amp * value_noise(freq * x + V3::Constant(0.37 * (c + 1)), seed * 31 + c * 7 + octave);
      norm += amp;
      amp *= 0.5;
      freq *= 2;
    }
    rgb[c] = std::clamp(0.5 + 0.9 * n / norm, 0.0, 1.0);
  }
  return rgb;
}

UnassembledObject generate_fracture(const FractureSpec& spec, std::uint64_t seed) {
  if (spec.fragments < 2 || spec.fragments > 8) {
    throw std::invalid_argument("generate_fracture: fragment count must be in [2, 8]");
  }
  std::mt19937_64 rng(seed);
  const auto primitive = make_primitive(spec.shape, rng);
  const auto dense = static_cast<Index>(std::ceil(double(spec.points) * spec.oversample));
  const double density = double(dense) / primitive->area();

  SurfaceSample surface;
  primitive->sample_surface(rng, dense, surface);

  std::vector<Piece> pieces;
  constexpr int kMaxAttempts = 100;
  int attempts = 0;
  for (;;) {
    pieces.assign(1, Piece{{}, surface.points, surface.normals});
    bool ok = true;
    for (int cut = 0; cut + 1 < spec.fragments && ok; ++cut) {
      // Split the currently largest piece.
      auto largest = std::max_element(pieces.begin(), pieces.end(),
                                       [](const Piece& a, const Piece& b) { return a.points.size() < b.points.size(); });
      Piece parent = *largest;
      V3 centroid = V3::Zero();
      for (const auto& p : parent.points) centroid += p;
      centroid /= double(parent.points.size());
      double reach = 0;
      for (const auto& p : parent.points) reach = std::max(reach, (p - centroid).norm());

      const V3 n = primitive->cut_normal(rng);
      std::uniform_real_distribution<double> shift(-0.25, 0.25);
      const double offset = n.dot(centroid) + shift(rng) * reach;

      Piece pos{parent.region, {}, {}}, negp{parent.region, {}, {}};
      pos.region.push_back({n, offset});
      negp.region.push_back({-n, -offset});
      for (std::size_t k = 0; k < parent.points.size(); ++k) {
        Piece& dst = n.dot(parent.points[k]) - offset >= 0 ? pos : negp;
        dst.points.push_back(parent.points[k]);
        dst.normals.push_back(parent.normals[k]);
      }
      // Fracture surface: the plane section inside the solid and the parent region.
      V3 u = n.unitOrthogonal();
      V3 w = n.cross(u);
      const V3 base = n * offset;
      const double disk = 1.0 + std::abs(offset);
      const auto candidates = static_cast<Index>(std::ceil(density * std::numbers::pi * disk * disk));
      std::uniform_real_distribution<double> unit(0, 1);
      for (Index k = 0; k < candidates; ++k) {
        const double r = disk * std::sqrt(unit(rng));
        const double phi = 2 * std::numbers::pi * unit(rng);
        const V3 x = base + r * std::cos(phi) * u + r * std::sin(phi) * w;
        if (!primitive->inside(x) || !in_region(parent.region, x)) continue;
        pos.points.push_back(x);
        pos.normals.push_back(-n);
        negp.points.push_back(x);
        negp.normals.push_back(n);
      }
      const double total = double(dense);
      if (double(pos.points.size()) < spec.min_fraction * total ||
          double(negp.points.size()) < spec.min_fraction * total) {
        ok = false;
        break;
      }
      *largest = std::move(pos);
      pieces.push_back(std::move(negp));
    }
    if (ok) break;
    if (++attempts >= kMaxAttempts) {
      throw DataError("generate_fracture: could not produce " + std::to_string(spec.fragments) +
                      " fragments above the minimum size after " + std::to_string(kMaxAttempts) + " attempts");
    }
  }

  std::vector<Fragment> raw;
  for (const auto& piece : pieces) {
    Fragment f;
    const auto n = static_cast<Index>(piece.points.size());
    f.positions.resize(n, 3);
    f.normals.resize(n, 3);
    f.colors.resize(n, 3);
    for (Index i = 0; i < n; ++i) {
      f.positions.row(i) = piece.points[i].transpose();
      f.normals.row(i) = piece.normals[i].transpose();
      f.colors.row(i) = color_field(piece.points[i], seed).transpose();
    }
    f.scale = spec.scale;
    raw.push_back(std::move(f));
  }
  auto sampled = sample_object_points(raw, spec.points, seed);

  UnassembledObject obj;
  obj.shape = shape_name(spec.shape);
  obj.seed = seed;
  obj.gt_poses.emplace();
  for (auto& f : sampled) {
    auto [centered, c] = center_fragment(f);
    obj.fragments.push_back(std::move(centered));
    obj.gt_poses->push_back(Pose{Rotation<double>::identity(), c});
  }
  return obj;
}

}  // namespace em3rf
