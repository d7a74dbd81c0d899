#include <gtest/gtest.h>

#include <cmath>

#include "caps/layers.hpp"
#include "test_support.hpp"

using namespace caps;
using testing_support::check_gradients;
using testing_support::project;
using testing_support::random_leaf;

namespace {
std::vector<float> to_vec(std::span<const float> s) { return {s.begin(), s.end()}; }
}  // namespace

TEST(Linear, IdentityPassesThrough) {
  Rng rng(1);
  LinearLayer layer = LinearLayer::create(3, 3, rng);
  layer.weights = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  layer.bias = Tensor::zeros({3});
  const Tensor x = Tensor::from_data({3}, {0.5f, -2.0f, 7.0f});
  EXPECT_EQ(to_vec(linear_forward(layer, x).data()), to_vec(x.data()));
}

TEST(Linear, DecoderParameterCounts) {
  Rng rng(1);
  EXPECT_EQ(LinearLayer::create(160, 512, rng).parameter_count(), 82432u);
  EXPECT_EQ(LinearLayer::create(512, 1024, rng).parameter_count(), 525312u);
  EXPECT_EQ(LinearLayer::create(1024, 784, rng).parameter_count(), 803600u);
  const auto l = LinearLayer::create(160, 512, rng);
  ParameterList p;
  l.append_parameters("fc", p);
  EXPECT_EQ(parameter_count(p), 82432u);
}

TEST(Linear, MatchesMatmulPlusBiasOracle) {
  Rng rng(4);
  const auto layer = LinearLayer::create(6, 4, rng);
  const Tensor x = Tensor::uniform({3, 6}, -1.0f, 1.0f, rng);
  const Tensor y = linear_forward(layer, x);
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = layer.bias.at({o});
      for (std::size_t i = 0; i < 6; ++i) acc += static_cast<double>(layer.weights.at({o, i})) * x.at({b, i});
      EXPECT_NEAR(y.at({b, o}), acc, 1e-6);
    }
  EXPECT_THROW(linear_forward(layer, Tensor::zeros({5})), ShapeError);
}

TEST(Linear, InitializationBounds) {
  Rng rng(9);
  const auto layer = LinearLayer::create(16, 8, rng);
  for (float w : layer.weights.data()) EXPECT_LE(std::fabs(w), 0.25f);
  EXPECT_TRUE(layer.weights.requires_grad());
  EXPECT_TRUE(layer.bias.requires_grad());
}

TEST(Pool, SingleWindowExamples) {
  const Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_FLOAT_EQ(pool2d(x, {PoolKind::kMax, 2, 2}).item(), 4.0f);
  EXPECT_FLOAT_EQ(pool2d(x, {PoolKind::kAverage, 2, 2}).item(), 2.5f);
}

TEST(Pool, ShapeAlgebra) {
  EXPECT_EQ(pool2d(Tensor::zeros({3, 6, 6}), {}).shape(), (Shape{3, 3, 3}));
  EXPECT_EQ(pool2d(Tensor::zeros({2, 3, 13, 13}), {PoolKind::kMax, 3, 2}).shape(), (Shape{2, 3, 6, 6}));
  EXPECT_THROW(pool2d(Tensor::zeros({1, 2, 2}), {PoolKind::kMax, 3, 1}), ShapeError);
}

TEST(Pool, MaxGradientGoesToFirstMaximumAndConservesMass) {
  // Window has a tie between positions 1 and 3.
  const Tensor x = Tensor::from_data({1, 2, 2}, {0.0f, 5.0f, 1.0f, 5.0f}, true);
  pool2d(x, {}).backward();
  EXPECT_EQ(to_vec(x.grad()), (std::vector<float>{0, 1, 0, 0}));

  Rng rng(3);
  const Tensor y = Tensor::uniform({2, 6, 6}, -1.0f, 1.0f, rng, true);
  const Tensor pooled = pool2d(y, {});
  sum_all(pooled).backward();
  // Every window sends exactly one unit, and only to its maximum.
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t wy = 0; wy < 3; ++wy)
      for (std::size_t wx = 0; wx < 3; ++wx) {
        double mass = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t at = (c * 6 + wy * 2 + dy) * 6 + wx * 2 + dx;
            const float g = y.grad()[at];
            mass += g;
            if (g != 0.0f) {
              EXPECT_EQ(y.data()[at], pooled.at({c, wy, wx}));
            }
          }
        EXPECT_EQ(mass, 1.0);
      }
}

TEST(Pool, Gradients) {
  Rng rng(17);
  auto x = random_leaf({2, 2, 6, 6}, rng);
  EXPECT_LT(check_gradients([&] { return project(pool2d(x, {PoolKind::kAverage, 2, 2})); }, {x}).rel_error, 1e-3);
  EXPECT_LT(check_gradients([&] { return project(pool2d(x, {PoolKind::kMax, 3, 2})); }, {x}).rel_error, 1e-3);
}

TEST(Flatten, ExamplesAndGradient) {
  Rng rng(2);
  auto x = random_leaf({2, 3, 4}, rng);
  EXPECT_EQ(flatten(x).size(), 24u);
  EXPECT_EQ(to_vec(reshape(flatten(x), {2, 3, 4}).data()), to_vec(x.data()));
  sum_all(flatten(x)).backward();
  EXPECT_EQ(x.grad().size(), 24u);
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(LayerGradients, LinearAndConv) {
  Rng rng(23);
  auto lin = LinearLayer::create(5, 3, rng);
  auto x = random_leaf({4, 5}, rng);
  EXPECT_LT(check_gradients([&] { return project(linear_forward(lin, x)); }, {x, lin.weights, lin.bias}).rel_error,
            1e-3);

  auto conv = Conv2dLayer::create({2, 3, 3, 3, 2, 1}, rng);
  auto img = random_leaf({2, 2, 7, 7}, rng);
  EXPECT_EQ(conv.parameter_count(), 3u * 2 * 9 + 3);
  EXPECT_LT(check_gradients([&] { return project(conv_forward(conv, img)); }, {img, conv.weights, conv.bias})
                .rel_error,
            1e-3);
}

TEST(Pool, MaxPoolPropagatesNaN) {
  for (std::size_t at = 0; at < 4; ++at) {
    std::vector<float> v{1.0f, 2.0f, 3.0f, 4.0f};
    v[at] = std::nanf("");
    const Tensor y = pool2d(Tensor::from_data({1, 2, 2}, v), PoolSpec{PoolKind::kMax, 2, 2});
    EXPECT_TRUE(std::isnan(y.item())) << "NaN at " << at;
  }
}
