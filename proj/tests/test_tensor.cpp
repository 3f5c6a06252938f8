#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "rinn/errors.hpp"
#include "rinn/tensor.hpp"

using namespace rinn;
using namespace rinn::testing;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.at({1, 2}) = 4.0;
  EXPECT_EQ(t[5], 4.0);
  EXPECT_THROW(t.at({2, 0}), DimensionError);
  EXPECT_THROW(t.reshaped({4}), DimensionError);
}

TEST(CyclicShift, SingleGroupPermutation) {
  const Tensor x({1, 1, 3}, {1.0, 2.0, 3.0});  // channels a, b, c
  const Tensor y = cyclic_shift_orientation(x, {1, 3}, 1);
  EXPECT_EQ(y.values(), (Storage{3.0, 1.0, 2.0}));
}

TEST(CyclicShift, IdentityAndFullPeriod) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({3, 4, 6}, rng);
  EXPECT_EQ(cyclic_shift_orientation(x, {2, 3}, 0), x);
  EXPECT_EQ(cyclic_shift_orientation(x, {2, 3}, 3), x);
  EXPECT_EQ(cyclic_shift_orientation(x, {2, 3}, -3), x);
}

TEST(CyclicShift, StaysInsideGroups) {
  const Tensor x({6}, {0, 1, 2, 10, 11, 12});
  const Tensor y = cyclic_shift_orientation(x, {2, 3}, 1);
  EXPECT_EQ(y.values(), (Storage{2, 0, 1, 12, 10, 11}));
}

TEST(CyclicShift, LayoutMismatchThrows) {
  const Tensor x({2, 2, 5});
  EXPECT_THROW(cyclic_shift_orientation(x, {2, 3}, 1), LayoutError);
  EXPECT_THROW(cyclic_shift_orientation(x, {0, 5}, 1), LayoutError);
}

TEST(CyclicShift, GroupPropertyAndSumPreserved) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = static_cast<int>(random_extent(rng, 1, 4));
    const int p = static_cast<int>(random_extent(rng, 1, 6));
    const Tensor x = random_tensor({random_extent(rng, 1, 4), random_extent(rng, 1, 4), static_cast<std::size_t>(m * p)}, rng);
    const int t1 = static_cast<int>(random_extent(rng, 0, 20)) - 10;
    const int t2 = static_cast<int>(random_extent(rng, 0, 20)) - 10;
    const GroupLayout layout{m, p};
    EXPECT_EQ(cyclic_shift_orientation(cyclic_shift_orientation(x, layout, t2), layout, t1),
              cyclic_shift_orientation(x, layout, t1 + t2));
    // Permutation: same multiset, so sorted values agree and the sum is exact.
    auto a = x.values(), b = cyclic_shift_orientation(x, layout, t1).values();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(CyclicShift, ArbitraryAxis) {
  // [2 kernels rows, 4 channels (m=2, p=2), 1]
  const Tensor x({1, 4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  const Tensor y = cyclic_shift_orientation(x, {2, 2}, 1, 1);
  EXPECT_EQ(y.values(), (Storage{2, 3, 0, 1, 6, 7, 4, 5}));
}

TEST(RotatePlane, ZeroAngleIsIdentity) {
  std::mt19937_64 rng(3);
  const Tensor img = random_tensor({7, 5}, rng);
  EXPECT_EQ(rotate_plane(img, 0.0), img);
  EXPECT_EQ(rotate_plane(img, 360.0), img);
}

TEST(RotatePlane, HorizontalLineBecomesVertical) {
  const Tensor line({3, 3}, {0, 0, 0, 1, 1, 1, 0, 0, 0});
  const Tensor expected({3, 3}, {0, 1, 0, 0, 1, 0, 0, 1, 0});
  EXPECT_EQ(rotate_plane(line, 90.0), expected);
}

TEST(RotatePlane, OffCenterDeltaAt45MatchesScalarOracle) {
  Tensor delta({5, 5});
  delta.at({1, 2}) = 1.0;
  const Tensor got = rotate_plane(delta, 45.0);
  const Tensor want = rotate_oracle(delta, 45.0);
  EXPECT_LT(max_abs_diff(got, want), 1e-12);
  // Frozen from the oracle: the delta lands between (1,1), (1,2) and (2,1).
  EXPECT_NEAR(got.at({1, 1}), 2.0 - std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(got.at({1, 2}), 0.20710678118654757, 1e-12);
  EXPECT_NEAR(got.at({2, 1}), 0.20710678118654757, 1e-12);
  EXPECT_NEAR(got.sum(), 1.0, 1e-12);
}

TEST(RotatePlane, MatchesScalarOracleOnRandomAngles) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const Tensor img = random_tensor({random_extent(rng, 2, 9), random_extent(rng, 2, 9)}, rng);
    const double angle = std::uniform_real_distribution<double>(-400.0, 400.0)(rng);
    EXPECT_LT(max_abs_diff(rotate_plane(img, angle), rotate_oracle(img, angle)), 1e-12);
  }
}

TEST(RotatePlane, QuarterTurnsAreExactPermutations) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {1u, 3u, 5u, 7u, 9u, 14u}) {
    const Tensor img = random_tensor({n, n}, rng);
    const Tensor r90 = turn90_oracle(img);
    const Tensor r180 = turn90_oracle(r90);
    const Tensor r270 = turn90_oracle(r180);
    EXPECT_EQ(rotate_plane(img, 90.0), r90) << n;
    EXPECT_EQ(rotate_plane(img, 180.0), r180) << n;
    EXPECT_EQ(rotate_plane(img, 270.0), r270) << n;
    EXPECT_EQ(rotate_plane(img, -90.0), r270) << n;
  }
}

TEST(RotatePlane, RoundTripOnInteriorDisk) {
  std::mt19937_64 rng(9);
  const std::size_t n = 33;
  // Smooth content: bilinear blur bound holds for band-limited images.
  Tensor img({n, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) img.at({r, c}) = std::sin(0.3 * r) * std::cos(0.2 * c);
  for (int trial = 0; trial < 10; ++trial) {
    const double angle = std::uniform_real_distribution<double>(0.0, 360.0)(rng);
    const Tensor back = rotate_plane(rotate_plane(img, angle), -angle);
    const double radius = n / 2.0 - 2.0, center = (n - 1) / 2.0;
    double worst = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (std::hypot(r - center, c - center) <= radius)
          worst = std::max(worst, std::abs(back.at({r, c}) - img.at({r, c})));
    EXPECT_LE(worst, 0.25 * img.max_abs()) << angle;
  }
}

TEST(RotatePlane, RejectsNonPlanes) {
  EXPECT_THROW(rotate_plane(Tensor({2, 2, 2}), 10.0), DimensionError);
  EXPECT_THROW(rotate_plane(Tensor({2, 2}), std::nan("")), ValidationError);
}
