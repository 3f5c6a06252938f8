#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "rinn/errors.hpp"
#include "rinn/network.hpp"

using namespace rinn;
using namespace rinn::testing;

namespace {

Tensor& weights_of(Layer& layer) {
  if (auto* c = std::get_if<Conv2DLayer>(&layer.params)) return c->weights;
  if (auto* d = std::get_if<DenseLayer>(&layer.params)) return d->weights;
  return std::get<CyclicConvLayer>(layer.params).kernels;
}

Tensor& bias_of(Layer& layer) {
  if (auto* c = std::get_if<Conv2DLayer>(&layer.params)) return c->bias;
  if (auto* d = std::get_if<DenseLayer>(&layer.params)) return d->bias;
  return std::get<CyclicConvLayer>(layer.params).bias;
}

// Gives every parameter, including biases, a random value so tests do not
// depend on zero-initialized biases.
void randomize(Model& model, std::mt19937_64& rng, double scale = 0.3) {
  for (Layer& layer : model.layers) {
    if (!layer.has_parameters()) continue;
    weights_of(layer) = random_tensor(weights_of(layer).shape(), rng, -scale, scale);
    bias_of(layer) = random_tensor(bias_of(layer).shape(), rng, -scale, scale);
  }
}

// Spatial quarter turn of every (orientation, class) plane of a pose volume.
Tensor turn_volume(const Tensor& v) {
  const std::size_t n = v.dim(0), p = v.dim(2), c = v.dim(3);
  Tensor out(v.shape());
  Tensor plane({n, n});
  for (std::size_t t = 0; t < p; ++t)
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t q = 0; q < n; ++q) plane.at({r, q}) = v.at({r, q, t, k});
      const Tensor turned = turn90_oracle(plane);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t q = 0; q < n; ++q) out.at({r, q, t, k}) = turned.at({r, q});
    }
  return out;
}

Tensor window(const Tensor& img, std::size_t top, std::size_t left, std::size_t size) {
  Tensor w({size, size});
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) w.at({r, c}) = img.at({top + r, left + c});
  return w;
}

ModelSpec tiny_spec() {
  ModelSpec spec;
  spec.input_size = 10;
  spec.class_count = 3;
  spec.n = 4;
  spec.layers = {{LayerKind::conv, 3, 2}, {LayerKind::maxpool, 2, 0}, {LayerKind::conv, 4, 3},
                 {LayerKind::dense, 1, 4}, {LayerKind::dense, 1, 3}};
  return spec;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rinn_test_" + name)).string();
}

}  // namespace

TEST(ModelSpec, StandardShapeChain) {
  const ModelSpec spec = ModelSpec::standard();
  EXPECT_NO_THROW(spec.validate());
  const Model model = build_base_model(spec, 1);
  ASSERT_EQ(model.layers.size(), 5u);
  std::mt19937_64 rng(1);
  const Tensor logits = classify_window(model, random_tensor({34, 34}, rng, 0, 1));
  EXPECT_EQ(logits.shape(), (Shape{15}));
}

TEST(ModelSpec, ParameterCount) {
  // conv 7x7x1x1 + 1, conv 14x14x1x36 + 36, dense 36x24 + 24, dense 24x15 + 15.
  const std::size_t expected = (49 + 1) + (196 * 36 + 36) + (36 * 24 + 24) + (24 * 15 + 15);
  EXPECT_EQ(build_base_model(ModelSpec::standard(), 3).parameter_count(), expected);
  EXPECT_EQ(expected, 8405u);
}

TEST(ModelSpec, ThirtyTwoPixelInputNamesTheFailingLayer) {
  ModelSpec spec = ModelSpec::standard();
  spec.input_size = 32;
  try {
    build_base_model(spec, 1);
    FAIL() << "expected a DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 2 (conv)"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("13x13"), std::string::npos) << e.what();
  }
}

TEST(ModelSpec, RejectsDeclaredCyclicLayer) {
  ModelSpec spec = ModelSpec::standard();
  spec.layers.insert(spec.layers.begin() + 3, {LayerKind::cyclic, 1, 36});
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(FcTo1x1, IdentityDense) {
  DenseLayer d{Tensor({3, 3}), Tensor({3})};
  for (std::size_t i = 0; i < 3; ++i) d.weights.at({i, i}) = 1.0;
  const Conv2DLayer c = fc_to_1x1(d);
  EXPECT_EQ(c.weights.shape(), (Shape{1, 1, 3, 3}));
  const Tensor x({2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  EXPECT_EQ(conv2d_forward(x, c), x);
}

TEST(FcTo1x1, RandomDenseMatchesConv) {
  std::mt19937_64 rng(2);
  const DenseLayer d{random_tensor({7, 5}, rng), random_tensor({5}, rng)};
  const Tensor x = random_tensor({1, 1, 7}, rng);
  EXPECT_LT(max_abs_diff(dense_forward(x, d).reshaped({1, 1, 5}), conv2d_forward(x, fc_to_1x1(d))), 1e-12);
  EXPECT_EQ(conv1x1_to_fc(fc_to_1x1(d)).weights, d.weights);
  EXPECT_THROW(conv2d_forward(random_tensor({1, 1, 6}, rng), fc_to_1x1(d)), DimensionError);
}

TEST(PoseModel, StandardShapes) {
  const Model pose = build_pose_model(build_base_model(ModelSpec::standard(), 4), 12, {6, 12});
  EXPECT_EQ(std::get<Conv2DLayer>(pose.layers[0].params).out_channels(), 6u);
  EXPECT_EQ(std::get<Conv2DLayer>(pose.layers[2].params).out_channels(), 432u);
  ASSERT_EQ(pose.cyclic_index(), std::optional<std::size_t>(3));
  const auto& cyc = std::get<CyclicConvLayer>(pose.layers[3].params);
  EXPECT_EQ(cyc.kernels.shape(), (Shape{1, 1, 432, 36}));
  EXPECT_EQ(pose.layers.size(), 6u);
  EXPECT_EQ(forward_pose(pose, Tensor({64, 64})).scores.shape(), (Shape{16, 16, 12, 15}));
  EXPECT_EQ(forward_pose(pose, Tensor({128, 128, 1})).scores.shape(), (Shape{48, 48, 12, 15}));
  EXPECT_THROW(forward_pose(pose, Tensor({64, 64, 3})), DimensionError);
}

TEST(PoseModel, GridGeometry) {
  const Model pose = build_pose_model(build_base_model(ModelSpec::standard(), 4), 12, {6, 12});
  const PoseGrid grid = pose_grid(pose);
  EXPECT_DOUBLE_EQ(grid.offset, 16.5);
  EXPECT_DOUBLE_EQ(grid.stride, 2.0);
  EXPECT_DOUBLE_EQ(grid.center(0), 16.5);
  EXPECT_DOUBLE_EQ(grid.center(15), 46.5);
  EXPECT_EQ(grid.nearest_cell(31.5), 8);  // 7.5 rounds away from zero
  EXPECT_EQ(grid.nearest_cell(30.4), 7);
  // Same geometry as the base model.
  const PoseGrid base = pose_grid(build_base_model(ModelSpec::standard(), 4));
  EXPECT_DOUBLE_EQ(base.offset, 16.5);
}

TEST(PoseModel, FiberZeroEqualsBaseModelOnAlignedWindows) {
  std::mt19937_64 rng(5);
  Model base = build_base_model(ModelSpec::standard(), 5);
  randomize(base, rng);
  const Model pose = build_pose_model(base, 12, {6, 12});
  const Tensor scene = random_tensor({64, 64}, rng, 0, 1);
  const Tensor logits = pose_logits(pose, scene);
  double worst = 0.0;
  for (std::size_t i = 0; i < 16; i += 3)
    for (std::size_t j = 0; j < 16; j += 5) {
      const Tensor ref = classify_window(base, window(scene, 2 * i, 2 * j, 34));
      for (std::size_t c = 0; c < 15; ++c) worst = std::max(worst, std::abs(ref[c] - logits.at({i, j, 0, c})));
    }
  EXPECT_LE(worst, 1e-9);
}

TEST(PoseModel, FibersAreNormalized) {
  std::mt19937_64 rng(6);
  Model pose = build_pose_model(build_base_model(ModelSpec::standard(), 6), 12, {6, 12});
  randomize(pose, rng, 2.0);
  const PoseMap pm = forward_pose(pose, random_tensor({64, 64}, rng, 0, 1));
  double worst = 0.0;
  for (std::size_t f = 0; f < pm.scores.size() / 15; ++f) {
    double s = 0.0;
    for (std::size_t c = 0; c < 15; ++c) s += pm.scores[f * 15 + c];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(PoseModel, DeterministicForFixedSeed) {
  const Model a = build_pose_model(build_base_model(ModelSpec::standard(), 9), 12, {6, 12});
  const Model b = build_pose_model(build_base_model(ModelSpec::standard(), 9), 12, {6, 12});
  EXPECT_EQ(model_to_text(a), model_to_text(b));
  std::mt19937_64 rng(9);
  const Tensor img = random_tensor({64, 64}, rng, 0, 1);
  EXPECT_EQ(forward_pose(a, img).scores, forward_pose(b, img).scores);
  EXPECT_NE(model_to_text(a), model_to_text(build_pose_model(build_base_model(ModelSpec::standard(), 10), 12, {6, 12})));
}

// Pool-free network at n = 4: quarter turns are exact index permutations, so
// equivariance holds to rounding.
TEST(PoseModel, QuarterTurnEquivarianceWithoutPooling) {
  std::mt19937_64 rng(11);
  ModelSpec spec;
  spec.input_size = 7;
  spec.class_count = 3;
  spec.n = 4;
  spec.layers = {{LayerKind::conv, 3, 2}, {LayerKind::conv, 5, 3}, {LayerKind::dense, 1, 4}, {LayerKind::dense, 1, 3}};
  Model base = build_base_model(spec, 11);
  randomize(base, rng);
  Model pose = build_pose_model(base, 4, {4, 4});
  // A non-identity cyclic layer exercises the wrap-around too.
  auto& cyc = std::get<CyclicConvLayer>(pose.layers[*pose.cyclic_index()].params);
  cyc.kernels = random_tensor(cyc.kernels.shape(), rng);
  const Tensor x = random_tensor({15, 15}, rng, 0, 1);
  const Tensor lhs = forward_pose(pose, turn90_oracle(x)).scores;
  const Tensor rhs = cyclic_shift_orientation(turn_volume(forward_pose(pose, x).scores), {1, 4}, 1, 2);
  ASSERT_EQ(lhs.shape(), (Shape{9, 9, 4, 3}));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-9);
}

TEST(Backward, MatchesFiniteDifferencesOnBaseModel) {
  std::mt19937_64 rng(12);
  Model model = build_base_model(tiny_spec(), 12);
  randomize(model, rng, 0.6);
  const Tensor x = random_tensor({10, 10, 1}, rng, 0, 1);
  const Tensor probe = random_tensor({3}, rng);
  ForwardTrace trace;
  forward(model, x, &trace);
  const Gradients g = backward(model, trace, probe);
  auto f = [&] { return dot(forward(model, x), probe); };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].has_parameters()) continue;
    EXPECT_LT(relative_error(g[i].dweights, numeric_gradient(weights_of(model.layers[i]), f)), 1e-6) << i;
    EXPECT_LT(relative_error(g[i].dbias, numeric_gradient(bias_of(model.layers[i]), f)), 1e-6) << i;
  }
}

TEST(Backward, MatchesFiniteDifferencesThroughCyclicHead) {
  std::mt19937_64 rng(13);
  Model base = build_base_model(tiny_spec(), 13);
  randomize(base, rng, 0.6);
  Model pose = build_pose_model(base, 4, {2, 4});
  // Unfreeze everything so gradients reach the rotated banks.
  for (Layer& layer : pose.layers) layer.frozen = false;
  auto& cyc = std::get<CyclicConvLayer>(pose.layers[*pose.cyclic_index()].params);
  cyc.kernels = random_tensor(cyc.kernels.shape(), rng);
  const Tensor x = random_tensor({14, 14, 1}, rng, 0, 1);
  const Tensor out = forward(pose, x);
  ASSERT_EQ(out.shape(), (Shape{3, 3, 4, 3}));
  const Tensor probe = random_tensor(out.shape(), rng);
  ForwardTrace trace;
  forward(pose, x, &trace);
  const Gradients g = backward(pose, trace, probe);
  auto f = [&] { return dot(forward(pose, x), probe); };
  for (std::size_t i = 0; i < pose.layers.size(); ++i) {
    if (!pose.layers[i].has_parameters()) continue;
    EXPECT_LT(relative_error(g[i].dweights, numeric_gradient(weights_of(pose.layers[i]), f)), 1e-6) << i;
    EXPECT_LT(relative_error(g[i].dbias, numeric_gradient(bias_of(pose.layers[i]), f)), 1e-6) << i;
  }
}

TEST(Backward, FrozenLayersReceiveNoGradient) {
  std::mt19937_64 rng(14);
  Model pose = build_pose_model(build_base_model(tiny_spec(), 14), 4, {2, 4});
  const Tensor x = random_tensor({14, 14, 1}, rng, 0, 1);
  ForwardTrace trace;
  const Tensor out = forward(pose, x, &trace);
  const Gradients g = backward(pose, trace, random_tensor(out.shape(), rng));
  EXPECT_TRUE(g[0].dweights.empty());
  EXPECT_TRUE(g[2].dweights.empty());
  EXPECT_FALSE(g[*pose.cyclic_index()].dweights.empty());
}

TEST(Backward, PartialTraceFromCachedFeatures) {
  std::mt19937_64 rng(15);
  Model pose = build_pose_model(build_base_model(tiny_spec(), 15), 4, {2, 4});
  const std::size_t cyc = *pose.cyclic_index();
  const Tensor x = random_tensor({14, 14, 1}, rng, 0, 1);
  const Tensor features = forward(pose, x, nullptr, 0, cyc);
  ForwardTrace full, part;
  const Tensor out = forward(pose, x, &full);
  EXPECT_EQ(forward(pose, features, &part, cyc), out);
  const Tensor probe = random_tensor(out.shape(), rng);
  const Gradients a = backward(pose, full, probe), b = backward(pose, part, probe);
  for (std::size_t i = cyc; i < pose.layers.size(); ++i) EXPECT_EQ(a[i].dweights, b[i].dweights) << i;
}

TEST(RotateLayer, WideningRules) {
  std::mt19937_64 rng(16);
  Model base = build_base_model(tiny_spec(), 16);
  randomize(base, rng);
  Model rep = base;
  rotate_layer(rep, 0, 4, 2, Widening::replicate);
  const Tensor& w = std::get<Conv2DLayer>(base.layers[2].params).weights;
  const Tensor& wide = std::get<Conv2DLayer>(rep.layers[2].params).weights;
  ASSERT_EQ(wide.shape(), (Shape{4, 4, 4, 3}));
  for (std::size_t e = 0; e < 16; ++e)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t co = 0; co < 3; ++co) EXPECT_EQ(wide[((e * 4) + i * 2 + j) * 3 + co], w[(e * 2 + i) * 3 + co] / 2.0);
  EXPECT_TRUE(rep.layers[0].frozen);
  EXPECT_EQ(rep.layers[0].layout, (GroupLayout{2, 2}));
  EXPECT_EQ(std::get<Conv2DLayer>(rep.layers[0].params).bias.values()[1], std::get<Conv2DLayer>(base.layers[0].params).bias[0]);

  // Rotating the last conv leaves canonical predictions unchanged.
  rotate_layer(rep, 2, 4, 4);
  EXPECT_EQ(std::get<DenseLayer>(rep.layers[3].params).in_features(), 12u);
  const Tensor x = random_tensor({10, 10, 1}, rng, 0, 1);
  Model narrow = base;
  rotate_layer(narrow, 0, 4, 2, Widening::replicate);
  EXPECT_LT(max_abs_diff(classify_window(rep, x), classify_window(narrow, x)), 1e-12);
}

TEST(RotateLayer, StageOrderIsEnforced) {
  Model m = build_base_model(tiny_spec(), 17);
  EXPECT_THROW(rotate_layer(m, 2, 4, 4), StageOrderError);
  EXPECT_THROW(insert_cyclic_head(m), StageOrderError);
  EXPECT_THROW(rotate_layer(m, 1, 4, 4), ConfigError);
  rotate_layer(m, 0, 4, 2);
  EXPECT_THROW(rotate_layer(m, 0, 4, 2), StageOrderError);
  EXPECT_THROW(insert_cyclic_head(m), StageOrderError);
  EXPECT_THROW(rotate_layer(m, 2, 4, 3), ConfigError);
  rotate_layer(m, 2, 4, 4);
  insert_cyclic_head(m);
  EXPECT_THROW(insert_cyclic_head(m), StageOrderError);
  EXPECT_THROW(rotate_layer(m, 2, 4, 4), StageOrderError);
}

TEST(InsertCyclicHead, PreservesCanonicalPredictions) {
  std::mt19937_64 rng(18);
  Model m = build_base_model(ModelSpec::standard(), 18);
  randomize(m, rng);
  rotate_layer(m, 0, 12, 6);
  rotate_layer(m, 2, 12, 12);
  const Model before = m;
  insert_cyclic_head(m);
  EXPECT_EQ(m.layers.size(), before.layers.size() + 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor({34, 34}, rng, 0, 1);
    const Tensor a = classify_window(before, x);
    const Tensor b = pose_logits(m, x);
    ASSERT_EQ(b.shape(), (Shape{1, 1, 12, 15}));
    for (std::size_t c = 0; c < 15; ++c) EXPECT_NEAR(a[c], b[c], 1e-9);
  }
}

TEST(Serialization, RoundTripIsByteIdentical) {
  std::mt19937_64 rng(19);
  Model m = build_pose_model(build_base_model(tiny_spec(), 19), 4, {2, 4});
  randomize(m, rng);
  const std::string path = temp_path("roundtrip.json");
  save_model(m, path);
  const Model loaded = load_model(path);
  EXPECT_EQ(model_to_text(loaded), model_to_text(m));
  const std::string path2 = temp_path("roundtrip2.json");
  save_model(loaded, path2);
  std::ifstream a(path), b(path2);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(sa.rfind("{\"format\":\"rinn-1\",\"n\":4,\"class_count\":3,\"layers\":[{\"kind\":\"conv\",\"shape\":[3,3,1,4]", 0), 0u);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    EXPECT_EQ(loaded.layers[i].frozen, m.layers[i].frozen);
    EXPECT_EQ(loaded.layers[i].layout, m.layers[i].layout);
  }
  const Tensor x = random_tensor({14, 14}, rng, 0, 1);
  EXPECT_EQ(forward_pose(loaded, x).scores, forward_pose(m, x).scores);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(Serialization, BaseModelRoundTrip) {
  const Model m = build_base_model(ModelSpec::standard(), 20);
  EXPECT_EQ(model_to_text(model_from_text(model_to_text(m))), model_to_text(m));
}

TEST(Serialization, DistinctErrors) {
  const std::string text = model_to_text(build_base_model(tiny_spec(), 21));
  EXPECT_THROW(model_from_text(text.substr(0, text.size() / 2)), MalformedError);
  EXPECT_THROW(model_from_text(""), MalformedError);

  std::string future = text;
  future.replace(future.find("rinn-1"), 6, "rinn-2");
  EXPECT_THROW(model_from_text(future), VersionError);

  std::string wrong_count = text;
  const auto pos = wrong_count.find("\"shape\":[3,3,1,2]");
  ASSERT_NE(pos, std::string::npos);
  wrong_count.replace(pos, 17, "\"shape\":[3,3,1,3]");
  EXPECT_THROW(model_from_text(wrong_count), ShapeError);

  std::string bad_chain = text;
  const auto dense = bad_chain.find("\"shape\":[3,4]");
  ASSERT_NE(dense, std::string::npos);
  bad_chain.replace(dense, 13, "\"shape\":[4,3]");
  EXPECT_THROW(model_from_text(bad_chain), ShapeError);

  EXPECT_THROW(model_from_text("{\"format\":\"other\"}"), MalformedError);
  EXPECT_THROW(load_model(temp_path("does_not_exist.json")), Error);
}
