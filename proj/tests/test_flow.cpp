#include "test_main.hpp"

#include "gradcheck.hpp"

#include "em3rf/certify.hpp"
#include "em3rf/flow.hpp"

using namespace em3rf;
using tensor::Index;
using T = tensor::Tensor<double>;

namespace {

Pose random_pose(std::mt19937_64& rng) {
  Pose g;
  g.rotation = sample_uniform_rotation<double>(rng);
  std::normal_distribution<double> n;
  g.translation = Vector3<double>(n(rng), n(rng), n(rng));
  return g;
}

double rot_err_deg(const Pose& a, const Pose& b) { return rotation_angle(a.rotation, b.rotation) * 180 / M_PI; }

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.c_geo = 8;
  c.c_rgb = 4;
  c.geo_blocks = 1;
  c.rgb_blocks = 1;
  c.shape_dim = 16;
  c.seg_hidden = 8;
  c.gram_channels = 4;
  return c;
}

FlowConfig tiny_flow(VelocityArch arch = VelocityArch::equivariant) {
  FlowConfig f;
  f.arch = arch;
  f.pool_channels = 4;
  f.pool_gates = 2;
  f.vector_width = 8;
  f.hidden = 16;
  f.blocks = 2;
  f.cross_channels = 4;
  return f;
}

struct Fixture {
  EncoderConfig ec = tiny_encoder();
  tensor::ParameterStore<double> store;
  FragmentEncoder<double> encoder{ec, store, 1};
  std::vector<Fragment> frags;
  std::vector<FragmentFeatures<double>> feats;

  explicit Fixture(int m, bool enrich = false) {
    for (int i = 0; i < m; ++i) {
      frags.push_back(random_fragment(24, 100 + i));
      feats.push_back(extract_features(encoder, frags.back(), enrich));
    }
  }
  std::vector<const FragmentFeatures<double>*> tokens() const {
    std::vector<const FragmentFeatures<double>*> out;
    for (const auto& f : feats) out.push_back(&f);
    return out;
  }
};

}  // namespace

TEST_CASE("make_flow_sample examples") {
  Pose g0 = Pose::identity(), g1 = Pose::identity();
  g1.translation = Vector3<double>(1, 0, 0);
  const auto s = make_flow_sample(g0, g1, 0.0);
  CHECK((s.target.translational - Vector3<double>(1, 0, 0)).norm() < 1e-15);
  CHECK(s.target.rotational.norm() == 0.0);

  std::mt19937_64 rng(1);
  g1.rotation = sample_uniform_rotation<double>(rng);
  g0.rotation = g1.rotation;
  for (double t : {0.0, 0.3, 0.9, 0.999}) CHECK(make_flow_sample(g0, g1, t).target.rotational.norm() < 1e-12);

  CHECK_THROWS_AS((void)make_flow_sample(g0, g1, 1.0), std::domain_error);
  CHECK_THROWS_AS((void)make_flow_sample(g1, 1.5, rng), std::domain_error);
  CHECK_THROWS_AS((void)make_flow_sample(g0, g1, -0.1), std::domain_error);
}

TEST_CASE("transporting the target for the remaining time reaches g1") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 0.999);
  double worst_r = 0, worst_t = 0;
  for (int k = 0; k < 500; ++k) {
    const Pose g1 = random_pose(rng);
    const auto s = make_flow_sample(g1, u(rng), rng);
    const double rest = 1 - s.t;
    const auto r = exp_transport(s.gt.rotation, AxisAngle<double>(rest * s.target.rotational));
    worst_r = std::max(worst_r, (r.matrix() - g1.rotation.matrix()).norm());
    worst_t = std::max(worst_t, (s.gt.translation + rest * s.target.translational - g1.translation).norm());
    // Interpolant invariants.
    CHECK(rotation_angle(s.gt.rotation, geodesic_rotation(s.g0.rotation, g1.rotation, s.t)) < 1e-12);
  }
  CHECK(worst_r < 1e-6);
  CHECK(worst_t < 1e-6);
}

TEST_CASE("flow_loss examples and gradient") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<Tangent> targets(5);
  for (auto& v : targets) {
    v.rotational = Vector3<double>(n(rng), n(rng), n(rng));
    v.translational = Vector3<double>(n(rng), n(rng), n(rng));
  }
  const T tgt = tangent_rows<double>(targets);
  CHECK(flow_loss(tgt, tgt, 1.0).item() < 1e-12);

  auto shifted = targets;
  shifted[2].translational.x() += 1.0;
  CHECK(flow_loss(tangent_rows<double>(shifted), tgt, 1.0).item() == doctest::Approx(1.0 / 5).epsilon(1e-12));
  auto rot_shift = targets;
  rot_shift[0].rotational.y() += 1.0;
  CHECK(flow_loss(tangent_rows<double>(rot_shift), tgt, 3.0).item() == doctest::Approx(3.0 / 5).epsilon(1e-12));

  CHECK_THROWS_AS((void)flow_loss(tangent_rows<double>(std::vector<Tangent>(4)), tgt, 1.0), tensor::ShapeError);
  CHECK_THROWS_AS((void)flow_loss(tgt, tgt, 0.0), std::invalid_argument);

  const double err = gradcheck::max_relative_error(
      [&](const std::vector<T>& in) { return flow_loss(in[0], tgt, 0.7); }, {gradcheck::random_tensor({5, 6}, rng)});
  CHECK(err < 1e-3);

  // Batch form: per-object means averaged over objects.
  std::vector<FlowSample> a(2), b(1);
  a[0].target = targets[0];
  a[1].target = targets[1];
  b[0].target = targets[2];
  std::vector<Tangent> pa = {targets[0], targets[1]}, pb = {targets[2]};
  pa[1].translational.z() += 2.0;
  CHECK(flow_loss({pa, pb}, {a, b}, 1.0) == doctest::Approx((4.0 / 2 + 0.0) / 2));
  CHECK_THROWS((void)flow_loss({pa}, {a, b}, 1.0));
}

TEST_CASE("so3_exp_rows matches so3_exp and finite differences") {
  std::mt19937_64 rng(4);
  auto w = gradcheck::random_tensor({6, 3}, rng, -2, 2);
  w.values()[0] = 1e-7;
  w.values()[1] = -2e-7;
  w.values()[2] = 0;
  const T r = so3_exp_rows(w);
  for (Index i = 0; i < 6; ++i) {
    const auto m = so3_exp(Vector3<double>(w[i * 3], w[i * 3 + 1], w[i * 3 + 2])).matrix();
    for (int a = 0; a < 9; ++a) CHECK(r[i * 9 + a] == doctest::Approx(m(a / 3, a % 3)).epsilon(1e-14));
  }
  const double err = gradcheck::max_relative_error(
      [](const std::vector<T>& in) { return gradcheck::probe(so3_exp_rows(in[0])); }, {w});
  CHECK(err < 1e-3);
  const double err_small = gradcheck::max_relative_error(
      [](const std::vector<T>& in) { return gradcheck::probe(so3_exp_rows(in[0])); },
      {gradcheck::random_tensor({3, 3}, rng, -1e-3, 1e-3)});
  CHECK(err_small < 1e-3);
}

TEST_CASE("velocity net: smoke, permutation, cross-fragment sensitivity") {
  for (auto arch : {VelocityArch::equivariant, VelocityArch::flat}) {
    Fixture fx(3, arch == VelocityArch::flat);
    tensor::ParameterStore<double> store;
    const VelocityNet<double> net(tiny_flow(arch), fx.ec, store, 7);
    std::mt19937_64 rng(5);
    std::vector<Pose> poses = {Pose::identity(), random_pose(rng), random_pose(rng)};
    const auto tok = fx.tokens();

    const auto single = predict_velocity(net, {poses[1]}, 0.4, {tok[1]}, 0);
    REQUIRE(single.size() == 1);
    CHECK(single[0].all_finite());
    CHECK_THROWS_AS((void)predict_velocity(net, {}, 0.4, {}, 0), std::invalid_argument);

    const auto base = predict_velocity(net, poses, 0.4, tok, 0);
    const std::vector<std::size_t> perm = {2, 0, 1};
    std::vector<Pose> pp;
    std::vector<const FragmentFeatures<double>*> pt;
    for (auto i : perm) {
      pp.push_back(poses[i]);
      pt.push_back(tok[i]);
    }
    const auto moved = predict_velocity(net, pp, 0.4, pt, 1);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK((moved[k].rotational - base[perm[k]].rotational).norm() < 1e-10);
      CHECK((moved[k].translational - base[perm[k]].translational).norm() < 1e-10);
    }

    auto other = tok;
    const auto replacement = extract_features(fx.encoder, random_fragment(24, 999), arch == VelocityArch::flat);
    other[2] = &replacement;
    const auto changed = predict_velocity(net, poses, 0.4, other, 0);
    CHECK((changed[1].rotational - base[1].rotational).norm() + (changed[1].translational - base[1].translational).norm() >
          1e-8);
  }
}

TEST_CASE("equivariant velocity net respects body-frame and global rotations") {
  Fixture fx(3);
  tensor::ParameterStore<double> store;
  const VelocityNet<double> net(tiny_flow(), fx.ec, store, 8);
  std::mt19937_64 rng(6);
  std::vector<Pose> poses = {Pose::identity(), random_pose(rng), random_pose(rng)};
  const auto base = predict_velocity(net, poses, 0.25, fx.tokens(), 0);

  // Re-expressing fragment 1 in a rotated body frame leaves the world unchanged.
  const Matrix3<double> q = sample_uniform_rotation<double>(rng).matrix();
  Fragment f1 = fx.frags[1];
  f1.positions = f1.positions * q.transpose();
  f1.normals = f1.normals * q.transpose();
  const auto feat1 = extract_features(fx.encoder, f1, false);
  auto tok = fx.tokens();
  tok[1] = &feat1;
  auto reframed = poses;
  reframed[1].rotation = Rotation<double>::from_matrix(poses[1].rotation.matrix() * q.transpose());
  const auto body = predict_velocity(net, reframed, 0.25, tok, 0);
  for (int i = 0; i < 3; ++i) {
    const Vector3<double> expect_rot = i == 1 ? Vector3<double>(q * base[i].rotational) : base[i].rotational;
    CHECK((body[i].rotational - expect_rot).norm() < 1e-8 * (1 + expect_rot.norm()));
    CHECK((body[i].translational - base[i].translational).norm() < 1e-8 * (1 + base[i].translational.norm()));
  }

  // A global rotation of every pose rotates world-frame translational velocities only.
  const Matrix3<double> g = sample_uniform_rotation<double>(rng).matrix();
  auto turned = poses;
  for (auto& p : turned) {
    p.rotation = Rotation<double>::from_matrix(g * p.rotation.matrix());
    p.translation = g * p.translation;
  }
  const auto global = predict_velocity(net, turned, 0.25, fx.tokens(), 0);
  for (int i = 0; i < 3; ++i) {
    CHECK((global[i].rotational - base[i].rotational).norm() < 1e-8 * (1 + base[i].rotational.norm()));
    const Vector3<double> expect = g * base[i].translational;
    CHECK((global[i].translational - expect).norm() < 1e-8 * (1 + expect.norm()));
  }
}

TEST_CASE("velocity net parameters pass a finite-difference check through flow_loss") {
  Fixture fx(2);
  tensor::ParameterStore<double> store;
  FlowConfig cfg = tiny_flow();
  const VelocityNet<double> net(cfg, fx.ec, store, 9);
  std::mt19937_64 rng(7);
  const std::vector<Pose> poses = {Pose::identity(), random_pose(rng)};
  std::vector<Tangent> targets(2);
  targets[1].rotational = Vector3<double>(0.3, -0.2, 0.5);
  targets[1].translational = Vector3<double>(0.1, 0.4, -0.3);
  const T tgt = tangent_rows<double>(targets);
  const auto tok = fx.tokens();
  const double err = gradcheck::max_relative_error(
      [&](const std::vector<T>&) { return flow_loss(net.forward(tok, poses, 0.3, 0), tgt, 1.0); },
      {store.at("flow/lift/vectors"), store.at("flow/pool/gate/w"), store.at("flow/head/cross/u"),
       store.at("flow/block1/update_vec")});
  CHECK(err < 1e-3);
}

TEST_CASE("integrate: zero field, exact field, anchor, divergence") {
  std::mt19937_64 rng(8);
  const std::vector<Pose> start = {random_pose(rng), random_pose(rng)};
  const VelocityField zero = [](const std::vector<Pose>& p, double) { return std::vector<Tangent>(p.size()); };
  const auto same = integrate(zero, start, {});
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(same[i].rotation.matrix() == start[i].rotation.matrix());
    CHECK(same[i].translation == start[i].translation);
  }

  double worst_r = 0, worst_t = 0;
  for (int k = 0; k < 50; ++k) {
    const std::vector<Pose> g0 = {random_pose(rng), random_pose(rng)}, g1 = {random_pose(rng), random_pose(rng)};
    const auto out = integrate(exact_target_field(g1), g0, {});
    for (std::size_t i = 0; i < 2; ++i) {
      worst_r = std::max(worst_r, rot_err_deg(out[i], g1[i]));
      worst_t = std::max(worst_t, (out[i].translation - g1[i].translation).norm());
      CHECK(out[i].rotation.orthonormality_error() < 1e-5);
    }
  }
  MESSAGE("exact field, 100 steps: rotation " << worst_r << " deg, translation " << worst_t);
  CHECK(worst_r < 0.5);
  CHECK(worst_t < 1e-3);

  IntegrateOptions frozen;
  frozen.frozen = 0;
  const auto pinned = integrate(exact_target_field({start[1], start[0]}), start, frozen);
  CHECK(pinned[0].rotation.matrix() == start[0].rotation.matrix());
  CHECK(rot_err_deg(pinned[1], start[0]) < 1e-6);

  const VelocityField bad = [](const std::vector<Pose>& p, double t) {
    std::vector<Tangent> v(p.size());
    if (t > 0.025) v[1].translational.x() = std::numeric_limits<double>::quiet_NaN();
    return v;
  };
  try {
    (void)integrate(bad, start, {});
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("step 3") != std::string::npos);
  }
  CHECK_THROWS_AS((void)integrate(zero, start, {0}), std::invalid_argument);
}

TEST_CASE("integration re-projects drifting rotations") {
  // A field that keeps spinning fast accumulates round-off; outputs must stay on SO(3).
  const VelocityField spin = [](const std::vector<Pose>& p, double) {
    std::vector<Tangent> v(p.size());
    for (auto& x : v) x.rotational = Vector3<double>(40, -25, 31);
    return v;
  };
  IntegrateOptions opt;
  opt.steps = 5000;
  const auto out = integrate(spin, {Pose::identity()}, opt);
  CHECK(out[0].rotation.orthonormality_error() < 1e-5);
}

TEST_CASE("initial poses, anchor choice and anchor frame") {
  std::mt19937_64 rng(9);
  const auto ident = initial_poses(3, StartMode::identity_start, std::nullopt, rng);
  for (const auto& g : ident) CHECK(rot_err_deg(g, Pose::identity()) == 0.0);
  const auto noisy = initial_poses(3, StartMode::sample_p0, std::size_t{1}, rng);
  CHECK(rot_err_deg(noisy[1], Pose::identity()) == 0.0);
  CHECK(noisy[1].translation.norm() == 0.0);
  CHECK(rot_err_deg(noisy[0], Pose::identity()) > 0.0);
  CHECK(parse_start_mode("identity_start") == StartMode::identity_start);
  CHECK_THROWS(parse_start_mode("zero"));

  const Fragment small = random_fragment(10, 1), big = random_fragment(20, 2), twin = random_fragment(20, 3);
  CHECK(select_anchor({small, big}) == 1);
  const std::size_t pick = select_anchor({big, twin});
  // Rotating the fragments must not change the choice.
  Fragment rb = big, rt = twin;
  const Matrix3<double> q = sample_uniform_rotation<double>(rng).matrix();
  rb.positions = big.positions * q.transpose();
  rt.positions = twin.positions * q.transpose();
  CHECK(select_anchor({rb, rt}) == pick);

  const std::vector<Pose> poses = {random_pose(rng), random_pose(rng)};
  const auto rel = relative_to_anchor(poses, 1);
  CHECK(rot_err_deg(rel[1], Pose::identity()) < 1e-9);
  CHECK(rel[1].translation.norm() < 1e-12);
  const Pose back = poses[1] * rel[0];
  CHECK(rot_err_deg(back, poses[0]) < 1e-9);
}
