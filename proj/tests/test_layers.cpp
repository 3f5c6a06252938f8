#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "rinn/errors.hpp"
#include "rinn/layers.hpp"

using namespace rinn;
using namespace rinn::testing;

namespace {

Conv2DLayer random_conv(std::mt19937_64& rng, std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout) {
  return {random_tensor({kh, kw, cin, cout}, rng), random_tensor({cout}, rng)};
}

// Distinct values spaced well beyond the finite-difference step, so no
// perturbation can flip a pooling argmax.
Tensor tie_free_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::vector<double> values(t.size());
  std::iota(values.begin(), values.end(), 0.0);
  std::shuffle(values.begin(), values.end(), rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * values[i] - 0.3;
  return t;
}

}  // namespace

TEST(Conv2D, OneByOneIdentity) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({4, 5, 1}, rng);
  const Conv2DLayer layer{Tensor({1, 1, 1, 1}, 1.0), Tensor({1})};
  EXPECT_EQ(conv2d_forward(x, layer), x);
}

TEST(Conv2D, ZeroInputGivesBias) {
  std::mt19937_64 rng(2);
  const Conv2DLayer layer = random_conv(rng, 3, 2, 2, 4);
  const Tensor y = conv2d_forward(Tensor({5, 5, 2}), layer);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], layer.bias[i % 4]);
}

TEST(Conv2D, MatchesLoopOracle) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({5, 5, 2}, rng);
  const Conv2DLayer layer = random_conv(rng, 3, 3, 2, 3);
  EXPECT_LT(max_abs_diff(conv2d_forward(x, layer), conv2d_oracle(x, layer.weights, layer.bias)), 1e-12);
}

TEST(Conv2D, ShapeErrors) {
  std::mt19937_64 rng(4);
  const Conv2DLayer layer = random_conv(rng, 3, 3, 2, 1);
  EXPECT_THROW(conv2d_forward(Tensor({2, 5, 2}), layer), DimensionError);
  EXPECT_THROW(conv2d_forward(Tensor({5, 5, 3}), layer), DimensionError);
  EXPECT_THROW(conv2d_forward(Tensor({5, 5}), layer), DimensionError);
  EXPECT_THROW(conv2d_backward(Tensor({5, 5, 2}), layer, Tensor({2, 2, 1})), DimensionError);
}

TEST(Conv2D, ZeroUpstreamGradient) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({6, 5, 2}, rng);
  const Conv2DLayer layer = random_conv(rng, 2, 3, 2, 3);
  const auto g = conv2d_backward(x, layer, Tensor({5, 3, 3}));
  EXPECT_EQ(g.dx.max_abs(), 0.0);
  EXPECT_EQ(g.dweights.max_abs(), 0.0);
  EXPECT_EQ(g.dbias.max_abs(), 0.0);
}

TEST(Conv2D, SinglePixelGradientIsInputPatch) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({5, 6, 2}, rng);
  const Conv2DLayer layer = random_conv(rng, 3, 2, 2, 2);
  Tensor dy({3, 5, 2});
  dy.at({1, 3, 1}) = 1.0;
  const auto g = conv2d_backward(x, layer, dy);
  for (std::size_t di = 0; di < 3; ++di)
    for (std::size_t dj = 0; dj < 2; ++dj)
      for (std::size_t ci = 0; ci < 2; ++ci) {
        EXPECT_EQ(g.dweights.at({di, dj, ci, 1}), x.at({1 + di, 3 + dj, ci}));
        EXPECT_EQ(g.dweights.at({di, dj, ci, 0}), 0.0);
      }
  EXPECT_EQ(g.dbias[0], 0.0);
  EXPECT_EQ(g.dbias[1], 1.0);
}

TEST(Conv2D, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t kh = random_extent(rng, 1, 3), kw = random_extent(rng, 1, 3);
    Tensor x = random_tensor({kh + random_extent(rng, 0, 4), kw + random_extent(rng, 0, 4), random_extent(rng, 1, 3)}, rng);
    Conv2DLayer layer = random_conv(rng, kh, kw, x.dim(2), random_extent(rng, 1, 3));
    const Tensor probe = random_tensor(conv2d_forward(x, layer).shape(), rng);
    auto f = [&] { return dot(conv2d_forward(x, layer), probe); };
    const auto g = conv2d_backward(x, layer, probe);
    EXPECT_LT(relative_error(g.dx, numeric_gradient(x, f)), 1e-6);
    EXPECT_LT(relative_error(g.dweights, numeric_gradient(layer.weights, f)), 1e-6);
    EXPECT_LT(relative_error(g.dbias, numeric_gradient(layer.bias, f)), 1e-6);
  }
}

TEST(Conv2D, LinearInInputAndWeights) {
  std::mt19937_64 rng(8);
  const Tensor x1 = random_tensor({6, 6, 2}, rng), x2 = random_tensor({6, 6, 2}, rng);
  Conv2DLayer layer = random_conv(rng, 3, 3, 2, 2);
  layer.bias.fill(0.0);
  const double a = 0.7, b = -1.3;
  Tensor mix(x1.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x1[i] + b * x2[i];
  const Tensor y1 = conv2d_forward(x1, layer), y2 = conv2d_forward(x2, layer), ym = conv2d_forward(mix, layer);
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym[i], a * y1[i] + b * y2[i], 1e-12);

  Conv2DLayer other = random_conv(rng, 3, 3, 2, 2);
  other.bias.fill(0.0);
  Conv2DLayer wmix{Tensor(layer.weights.shape()), Tensor({2})};
  for (std::size_t i = 0; i < wmix.weights.size(); ++i) wmix.weights[i] = a * layer.weights[i] + b * other.weights[i];
  const Tensor yo = conv2d_forward(x1, other), yw = conv2d_forward(x1, wmix);
  for (std::size_t i = 0; i < yw.size(); ++i) EXPECT_NEAR(yw[i], a * y1[i] + b * yo[i], 1e-12);
}

TEST(Conv2D, TranslationEquivariance) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({8, 8, 2}, rng);
  const Conv2DLayer layer = random_conv(rng, 3, 3, 2, 2);
  Tensor shifted(x.shape());
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 1; j < 8; ++j)
      for (std::size_t c = 0; c < 2; ++c) shifted.at({i, j, c}) = x.at({i, j - 1, c});
  const Tensor y = conv2d_forward(x, layer), ys = conv2d_forward(shifted, layer);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 1; j < 6; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(ys.at({i, j, c}), y.at({i, j - 1, c}), 1e-12);
}

TEST(Dense, MatchesConvOnSinglePixelAndGradients) {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({5}, rng);
  DenseLayer layer{random_tensor({5, 3}, rng), random_tensor({3}, rng)};
  const Tensor probe = random_tensor({3}, rng);
  auto f = [&] { return dot(dense_forward(x, layer), probe); };
  const auto g = dense_backward(x, layer, probe);
  EXPECT_LT(relative_error(g.dx, numeric_gradient(x, f)), 1e-6);
  EXPECT_LT(relative_error(g.dweights, numeric_gradient(layer.weights, f)), 1e-6);
  EXPECT_LT(relative_error(g.dbias, numeric_gradient(layer.bias, f)), 1e-6);
  EXPECT_THROW(dense_forward(Tensor({4}), layer), DimensionError);
}

TEST(MaxPool, ConstantInputTiesToFirst) {
  const PoolResult r = maxpool2_forward(Tensor({4, 4, 1}, 2.5));
  for (std::size_t i = 0; i < r.y.size(); ++i) EXPECT_EQ(r.y[i], 2.5);
  // Window origins of a 4x4 single-channel map.
  EXPECT_EQ(r.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(MaxPool, SmallWindow) {
  const PoolResult r = maxpool2_forward(Tensor({2, 2, 1}, {1, 2, 3, 4}));
  EXPECT_EQ(r.y.values(), Storage{4.0});
  EXPECT_EQ(r.argmax, std::vector<std::size_t>{3});
}

TEST(MaxPool, MatchesOracleAndRejectsOddExtent) {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({8, 8, 3}, rng);
  EXPECT_EQ(maxpool2_forward(x).y, maxpool_oracle(x));
  EXPECT_THROW(maxpool2_forward(Tensor({5, 4, 1})), DimensionError);
}

TEST(MaxPool, BackwardRoutesToArgmax) {
  std::mt19937_64 rng(12);
  Tensor x = tie_free_tensor({6, 4, 2}, rng);
  const PoolResult r = maxpool2_forward(x);
  EXPECT_EQ(maxpool2_backward(r.argmax, x.shape(), Tensor(r.y.shape())).max_abs(), 0.0);

  Tensor onehot(r.y.shape());
  onehot[5] = 1.0;
  const Tensor dx = maxpool2_backward(r.argmax, x.shape(), onehot);
  EXPECT_EQ(dx[r.argmax[5]], 1.0);
  EXPECT_EQ(dx.sum(), 1.0);

  const Tensor probe = random_tensor(r.y.shape(), rng);
  auto f = [&] { return dot(maxpool2_forward(x).y, probe); };
  EXPECT_LT(relative_error(maxpool2_backward(r.argmax, x.shape(), probe), numeric_gradient(x, f)), 1e-6);
}

TEST(Relu, ForwardAndBackward) {
  EXPECT_EQ(relu(Tensor({3}, {-1.0, -0.5, 0.0})).max_abs(), 0.0);
  const Tensor pos({3}, {0.0, 0.5, 2.0});
  EXPECT_EQ(relu(pos), pos);

  std::mt19937_64 rng(13);
  Tensor x = random_tensor({20}, rng);
  for (double& v : x.values())
    if (std::abs(v) < 1e-3) v = 0.5;
  const Tensor probe = random_tensor({20}, rng);
  auto f = [&] { return dot(relu(x), probe); };
  EXPECT_LT(relative_error(relu_backward(x, probe), numeric_gradient(x, f)), 1e-6);
}

TEST(SoftmaxLoss, TwoClassSymmetry) {
  const LossResult r = softmax_loss(Tensor({2}), Tensor({2}, {1.0, 0.0}));
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(r.dlogits[0], -0.5, 1e-15);
  EXPECT_NEAR(r.dlogits[1], 0.5, 1e-15);
}

TEST(SoftmaxLoss, BackgroundLabelOnFifteenClasses) {
  const LossResult r = softmax_loss(Tensor({15}), Tensor({15}));
  EXPECT_NEAR(r.loss, std::log(15.0), 1e-14);
  for (double g : r.dlogits.values()) EXPECT_NEAR(g, 1.0 / 15.0, 1e-15);
}

TEST(SoftmaxLoss, BackgroundGradientStrictlyPositive) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({15}, rng, -8.0, 8.0);
    const LossResult r = softmax_loss(logits, Tensor({15}));
    for (double g : r.dlogits.values()) EXPECT_GT(g, 0.0);
  }
}

TEST(SoftmaxLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({7}, rng, -3.0, 3.0);
    Tensor label({7});
    if (trial % 3 == 1) label[trial % 7] = 1.0;
    if (trial % 3 == 2) {
      label[1] = 0.3;
      label[4] = 0.5;
    }
    auto f = [&] { return softmax_loss(logits, label).loss; };
    EXPECT_LT(relative_error(softmax_loss(logits, label).dlogits, numeric_gradient(logits, f)), 1e-6);
  }
}

TEST(SoftmaxLoss, RejectsNegativeLabels) {
  EXPECT_THROW(softmax_loss(Tensor({3}), Tensor({3}, {0.5, -0.1, 0.0})), ValidationError);
  EXPECT_THROW(softmax_loss(Tensor({3}), Tensor({2})), DimensionError);
}
