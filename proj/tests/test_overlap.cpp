#include "test_main.hpp"

#include "gradcheck.hpp"

#include "em3rf/overlap.hpp"
#include "em3rf/tensor/parameters.hpp"

#include <filesystem>

using namespace em3rf;
using tensor::Index;
using T = tensor::Tensor<double>;

namespace {

GridSpec unit_grid(Index n, double cell = 1.0) {
  GridSpec s;
  s.cell_size = cell;
  s.extents = {n, n, n};
  return s;
}

T as_tensor(const Points& p, bool grad = false) {
  return T::from_data({p.rows(), 3}, std::vector<double>(p.data(), p.data() + p.size()), grad);
}

// Solid unit cube sampled on a k³ lattice, centred at (offset, 0, 0).
Points solid_cube(double offset, int k = 12) {
  Points p(k * k * k, 3);
  Index n = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      for (int l = 0; l < k; ++l) {
        p.row(n++) << offset + (i + 0.5) / k - 0.5, (j + 0.5) / k - 0.5, (l + 0.5) / k - 0.5;
      }
  return p;
}

OccupancyGrid<double> binary_mask(const GridSpec& s, const std::vector<Index>& on) {
  std::vector<double> v(static_cast<std::size_t>(s.cell_count()), 0.0);
  for (Index c : on) v[c] = 1.0;
  return {s, T::from_data({s.extents[0], s.extents[1], s.extents[2]}, std::move(v))};
}

}  // namespace

TEST_CASE("voxelize examples") {
  const GridSpec s = unit_grid(8);
  const auto empty = voxelize(T::zeros({0, 3}), s, 1.5);
  for (double v : empty.values.values()) CHECK(v == 0.0);
  CHECK(empty.spec == s);

  Points one(1, 3);
  one << 3.5, 4.5, 2.5;
  const auto g = voxelize(as_tensor(one), s, 0.3);
  const auto& v = g.values.values();
  CHECK(v[(3 * 8 + 4) * 8 + 2] > 0.999);
  CHECK(v[(0 * 8 + 0) * 8 + 7] == 0.0);
  for (double x : v) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }

  // Product form saturates at one however many points pile up.
  Points many = Points::Constant(50, 3, 4.5);
  const auto sat = voxelize(as_tensor(many), s, 1.0);
  for (double x : sat.values.values()) CHECK(x <= 1.0);

  CHECK_THROWS_AS((void)voxelize(as_tensor(one), s, 0.0), std::invalid_argument);
}

TEST_CASE("voxelize expands the grid for outside points") {
  const GridSpec s = unit_grid(4);
  Points p(2, 3);
  p << -1.2, 0.5, 0.5, 5.5, 0.5, 0.5;
  const auto g = voxelize(as_tensor(p), s, 0.5);
  CHECK(g.spec.origin[0] == -2.0);
  CHECK(g.spec.extents[0] == 8);
  CHECK(g.spec.extents[1] == 4);
  CHECK(g.spec.cell_size == 1.0);
  CHECK(g.values.dim(0) == 8);
}

TEST_CASE("voxelize and soft_iou match finite differences") {
  std::mt19937_64 rng(3);
  const GridSpec s = unit_grid(6);
  using In = std::vector<T>;
  const double err = gradcheck::max_relative_error(
      [&](const In& in) { return gradcheck::probe(voxelize(in[0], s, 1.2).values); },
      {gradcheck::random_tensor({5, 3}, rng, 1.0, 5.0)});
  CHECK(err < 1e-3);

  const double err_iou = gradcheck::max_relative_error(
      [&](const In& in) { return soft_iou(voxelize(in[0], s, 1.2), voxelize(in[1], s, 1.2)); },
      {gradcheck::random_tensor({4, 3}, rng, 1.0, 4.0), gradcheck::random_tensor({4, 3}, rng, 2.0, 5.0)});
  CHECK(err_iou < 1e-3);
}

TEST_CASE("soft_iou examples") {
  const GridSpec s = unit_grid(4);
  const auto a = binary_mask(s, {0, 1, 2, 3});
  const auto b = binary_mask(s, {2, 3, 4, 5});
  const auto far = binary_mask(s, {40, 41});
  CHECK(std::abs(soft_iou(a, b).item() - 1.0 / 3.0) < 1e-6);
  CHECK(soft_iou(a, far).item() == 0.0);
  CHECK(soft_iou(a, a).item() == doctest::Approx(4.0 / (4.0 + 1e-6)).epsilon(1e-12));
  CHECK(soft_iou(a, b).item() == soft_iou(b, a).item());

  auto shifted = b;
  shifted.spec.origin[2] = 0.25;
  CHECK_THROWS_AS((void)soft_iou(a, shifted), std::invalid_argument);
}

TEST_CASE("no_overlap_loss examples") {
  const Points cube = solid_cube(0.0);
  CHECK(no_overlap_loss<double>({as_tensor(cube)}).item() == 0.0);
  CHECK(no_overlap_loss<double>({}).item() == 0.0);
  CHECK(no_overlap_loss<double>({as_tensor(cube), as_tensor(solid_cube(5.0))}).item() == 0.0);
  const double same = no_overlap_loss<double>({as_tensor(cube), as_tensor(cube), as_tensor(cube)}).item();
  CHECK(same == doctest::Approx(1.0).epsilon(1e-6));

  // Pose-level wrapper agrees with the tensor form.
  Pose moved = Pose::identity();
  moved.translation = Vector3<double>(0.5, 0, 0);
  const double direct = no_overlap_loss<double>({as_tensor(cube), as_tensor(solid_cube(0.5))}).item();
  CHECK(no_overlap_loss({cube, cube}, {Pose::identity(), moved}) == doctest::Approx(direct).epsilon(1e-12));
  const auto m = pairwise_iou({cube, solid_cube(0.5)});
  CHECK(m[0][1] == doctest::Approx(direct).epsilon(1e-12));
  CHECK(m[1][0] == m[0][1]);
  CHECK(m[0][0] == 0.0);
}

TEST_CASE("descent on translations separates interpenetrating cubes") {
  const Points cube = solid_cube(0.0);
  tensor::ParameterStore<double> store;
  auto ta = store.add_constant("a", {3}, 0.0);
  auto tb = store.add_constant("b", {3}, 0.0);
  tb.values()[0] = 0.5;
  tensor::AdamConfig cfg;
  cfg.lr = 0.01;
  tensor::Adam<double> opt(store, cfg);
  auto loss_at = [&] {
    return no_overlap_loss<double>({tensor::add_rowwise(as_tensor(cube), ta), tensor::add_rowwise(as_tensor(cube), tb)});
  };
  const double start = loss_at().item();
  for (int step = 0; step < 100; ++step) {
    opt.zero_grad();
    tensor::backward(loss_at());
    opt.step();
  }
  const double end = loss_at().item();
  MESSAGE("IoU " << start << " -> " << end);
  CHECK(end < 0.5 * start);
}

TEST_CASE("global rigid motion and monotone separation") {
  std::mt19937_64 rng(5);
  const Points a = solid_cube(0.0), b = solid_cube(0.4);
  const double base = no_overlap_loss<double>({as_tensor(a), as_tensor(b)}).item();
  for (int k = 0; k < 10; ++k) {
    Pose g;
    g.rotation = sample_uniform_rotation<double>(rng);
    g.translation = Vector3<double>::Random() * 3;
    const double moved =
        no_overlap_loss<double>({as_tensor(transform_points(g, a)), as_tensor(transform_points(g, b))}).item();
    CHECK(std::abs(moved - base) / base < 0.02);
  }

  double previous = 2.0;
  for (int k = 0; k < 50; ++k) {
    const double offset = 0.03 * k;
    const double iou = no_overlap_loss<double>({as_tensor(a), as_tensor(solid_cube(offset))}).item();
    CHECK(iou <= previous + 1e-12);
    CHECK(iou >= 0.0);
    CHECK(iou <= 1.0);
    previous = iou;
  }
}

TEST_CASE("grid dump roundtrip") {
  const GridSpec s = unit_grid(3, 0.5);
  Points one(1, 3);
  one << 0.7, 0.7, 0.7;
  const auto g = voxelize(as_tensor(one), s, 0.4);
  const auto stem = std::filesystem::temp_directory_path() / "em3rf_grid_dump";
  write_grid_dump(stem, g);
  const auto back = read_grid_dump(stem);
  CHECK(back.spec == g.spec);
  CHECK(back.values.values() == g.values.values());
}
