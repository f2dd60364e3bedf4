#include "test_main.hpp"

#include "gradcheck.hpp"
#include "op_cases.hpp"

#include "em3rf/tensor/checkpoint.hpp"
#include "em3rf/tensor/parameters.hpp"

#include <filesystem>
#include <fstream>

using namespace em3rf::tensor;
using gradcheck::max_relative_error;
using gradcheck::probe;
using gradcheck::random_tensor;
using T = Tensor<double>;
using Inputs = std::vector<T>;

namespace {

constexpr double kTol = 1e-3;


}  // namespace

TEST_CASE("matmul examples") {
  std::mt19937_64 rng(1);
  T a = random_tensor({3, 3}, rng);
  T eye = T::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  T prod = matmul(eye, a);
  CHECK(prod.values() == a.values());

  T x = T::from_data({1, 1}, {3.0}), y = T::from_data({1, 1}, {-2.5});
  CHECK(matmul(x, y).item() == -7.5);

  CHECK_THROWS_AS(matmul(random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)), ShapeError);

  const double err = max_relative_error([](const Inputs& in) { return probe(matmul(in[0], in[1])); },
                                        {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)});
  CHECK(err < kTol);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(2);
  T x = random_tensor({7}, rng);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  backward(sum(square(x)));
  for (std::size_t i = 0; i < 7; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.values()[i]).epsilon(1e-15));

  CHECK_THROWS_AS(backward(square(x)), ShapeError);

  // Two-layer MLP with a tanh hidden layer.
  auto mlp = [](const Inputs& in) {
    T h = tanh(linear(in[0], in[1], in[2]));
    return mean(square(linear(h, in[3], in[4])));
  };
  const double err = max_relative_error(mlp, {random_tensor({6, 4}, rng), random_tensor({8, 4}, rng),
                                              random_tensor({8}, rng), random_tensor({2, 8}, rng),
                                              random_tensor({2}, rng)});
  CHECK(err < kTol);
}

TEST_CASE("backward visits each node once on a diamond graph") {
  T x = T::from_data({3}, {1, 2, 3}, true);
  T a = scale(x, 2.0);
  T b = square(a);
  T c = exp(scale(a, 0.1));
  T loss = sum(add(b, c));  // x, a, b, inner scale, c, add, sum
  backward(loss);
  CHECK(last_backward_visits == 7);
  // d/dx [ (2x)^2 + exp(0.2x) ] = 8x + 0.2 exp(0.2x)
  for (int i = 0; i < 3; ++i) {
    const double xi = i + 1;
    CHECK(x.grad()[i] == doctest::Approx(8 * xi + 0.2 * std::exp(0.2 * xi)).epsilon(1e-14));
  }
}

TEST_CASE("finite-difference checks for every differentiable op") {
  std::mt19937_64 rng(3);
  const auto cases = gradcheck::differentiable_op_cases(rng);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    CHECK(max_relative_error(c.f, c.inputs) < kTol);
  }
}

TEST_CASE("minimum and maximum split ties evenly") {
  T a = T::from_data({2}, {1.0, 2.0}, true);
  T b = T::from_data({2}, {1.0, 3.0}, true);
  backward(add(sum(minimum(a, b)), sum(maximum(a, b))));
  CHECK(a.grad()[0] == 1.0);  // 0.5 from min + 0.5 from max
  CHECK(b.grad()[0] == 1.0);
  CHECK(a.grad()[1] == 1.0);
  CHECK(b.grad()[1] == 1.0);
}

TEST_CASE("shape errors") {
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(add(random_tensor({2, 3}, rng), random_tensor({3, 2}, rng)), ShapeError);
  CHECK_THROWS_AS(reshape(random_tensor({2, 3}, rng), {5}), ShapeError);
  CHECK_THROWS_AS(channel_mix(random_tensor({2, 3, 3}, rng), random_tensor({4, 2}, rng)), ShapeError);
  CHECK_THROWS_AS(T::from_data({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("forward is deterministic") {
  auto run = [] {
    std::mt19937_64 rng(5);
    T x = random_tensor({16, 8, 3}, rng);
    T w = random_tensor({12, 8}, rng);
    return softmax(reshape(channel_mix(x, w), {16, 36})).values();
  };
  CHECK(run() == run());
}

TEST_CASE("adam_step examples") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::vector<double> p{1.0, -2.0};
  AdamMoments<double> st;
  adam_step(p, {0.0, 0.0}, st, 1, cfg);
  CHECK(p == std::vector<double>{1.0, -2.0});

  std::vector<double> x{1.0};
  AdamMoments<double> sx;
  adam_step(x, {2.0 * x[0]}, sx, 1, cfg);
  CHECK(x[0] < 1.0);

  // f(x, y) = x² + 10 y²
  std::vector<double> q{1.0, 1.0};
  AdamMoments<double> sq;
  cfg.lr = 0.05;
  for (long step = 1; step <= 200; ++step) adam_step(q, {2 * q[0], 20 * q[1]}, sq, step, cfg);
  CHECK(std::hypot(q[0], q[1]) < 1e-2);
}

TEST_CASE("clip_grad_norm rescales the global norm") {
  ParameterStore<double> store;
  T a = store.add("a", {2}, {0, 0});
  T b = store.add("b", {1}, {0});
  a.mutable_grad() = {3, 0};
  b.mutable_grad() = {4};
  CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("checkpoint roundtrip") {
  std::mt19937_64 rng(6);
  ParameterStore<float> store;
  store.add_glorot("encoder/w", {4, 3}, rng);
  store.add_constant("flow/b", {5}, 0.25f);
  const auto path = std::filesystem::temp_directory_path() / "em3rf_test_ckpt.bin";
  write_checkpoint(path, export_store(store));

  const auto entries = read_checkpoint(path);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].name == "encoder/w");
  CHECK(entries[0].dtype == DType::f32);
  CHECK(entries[0].shape == Shape{4, 3});

  ParameterStore<float> other;
  other.add_constant("encoder/w", {4, 3}, 0.0f);
  other.add_constant("flow/b", {5}, 0.0f);
  CHECK(import_store(other, entries, "encoder/") == 1);
  CHECK(other.at("encoder/w").values() == store.at("encoder/w").values());
  CHECK(other.at("flow/b").values()[0] == 0.0f);

  ParameterStore<float> wrong;
  wrong.add_constant("encoder/w", {3, 4}, 0.0f);
  CHECK_THROWS_AS(import_store(wrong, entries), CheckpointError);

  std::ofstream(path, std::ios::binary) << "NOTACHECKPOINT";
  CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}
