#include "helpers.hpp"

#include <gtest/gtest.h>

using namespace sact;
using sact::testing::random_tensor;

namespace {

// Direct nested-loop convolution with explicit zero padding.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, const ConvSpec& s) {
  const auto geo = ConvGeometry::make(s, x.height(), x.width());
  Tensor<double> y(Shape{x.batch(), geo.out_h, geo.out_w, s.out_channels});
  for (Index n = 0; n < x.batch(); ++n)
    for (Index i = 0; i < geo.out_h; ++i)
      for (Index j = 0; j < geo.out_w; ++j)
        for (Index o = 0; o < s.out_channels; ++o) {
          double acc = 0;
          for (Index a = 0; a < s.kernel_h; ++a)
            for (Index b = 0; b < s.kernel_w; ++b) {
              const Index r = i * s.stride + a - geo.pad_top, c = j * s.stride + b - geo.pad_left;
              if (r < 0 || r >= x.height() || c < 0 || c >= x.width()) continue;
              for (Index ci = 0; ci < s.in_channels; ++ci) acc += x(n, r, c, ci) * k(a, b, ci, o);
            }
          y(n, i, j, o) = acc;
        }
  return y;
}

}  // namespace

TEST(Tensor, LayoutIsBatchMajorChannelsFastest) {
  Tensor<double> t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120);
  EXPECT_EQ(t.offset(1, 0, 0, 0), 60);
  EXPECT_EQ(t.offset(0, 1, 0, 0), 20);
  EXPECT_EQ(t.offset(0, 0, 1, 0), 5);
  EXPECT_EQ(t.offset(0, 0, 0, 1), 1);
}

TEST(Tensor, NegativeExtentRejected) { EXPECT_THROW(Tensor<double>(Shape{1, -1, 2, 2}), std::invalid_argument); }

TEST(Tensor, ExampleRoundTrip) {
  std::mt19937_64 rng(1);
  const auto t = random_tensor(Shape{3, 2, 2, 2}, rng);
  Tensor<double> u(t.shape());
  for (Index n = 0; n < 3; ++n) u.set_example(n, t.example(n));
  EXPECT_TRUE(u.identical(t));
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor(Shape{2, 5, 4, 1}, rng);
  const ConvSpec s{1, 1, 1, 1, 1, Padding::same};
  const Tensor<double> k(s.kernel_shape(), 1.0);
  EXPECT_TRUE(conv2d(x, k, s).identical(x));
}

TEST(Conv2d, OnesKernelCountsWindow) {
  const ConvSpec s{3, 3, 1, 1, 1, Padding::same};
  const auto y = conv2d(Tensor<double>(Shape{1, 5, 5, 1}, 1.0), Tensor<double>(s.kernel_shape(), 1.0), s);
  EXPECT_EQ(y(0, 2, 2, 0), 9.0);
  EXPECT_EQ(y(0, 0, 0, 0), 4.0);
  EXPECT_EQ(y(0, 0, 2, 0), 6.0);
}

TEST(Conv2d, SameStrideTwoHalves) {
  const ConvSpec s{3, 3, 2, 4, 2, Padding::same};
  const auto y = conv2d(Tensor<double>(Shape{1, 224, 224, 2}), Tensor<double>(s.kernel_shape()), s);
  EXPECT_EQ(y.height(), 112);
  EXPECT_EQ(y.width(), 112);
  EXPECT_EQ(ConvSpec({7, 7, 1, 1, 2, Padding::same}).output_extent(7, 7), 4);
  EXPECT_EQ(ConvSpec({3, 3, 1, 1, 2, Padding::valid}).output_extent(8, 3), 3);
}

TEST(Conv2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  for (const ConvSpec s : {ConvSpec{3, 3, 3, 4, 1, Padding::same}, ConvSpec{3, 3, 3, 2, 2, Padding::same},
                           ConvSpec{1, 1, 3, 5, 2, Padding::same}, ConvSpec{7, 7, 3, 2, 2, Padding::same},
                           ConvSpec{3, 3, 3, 2, 1, Padding::valid}}) {
    const auto x = random_tensor(Shape{2, 7, 6, 3}, rng);
    const auto k = random_tensor(s.kernel_shape(), rng);
    const auto got = conv2d(x, k, s);
    const auto want = naive_conv(x, k, s);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT((got.array() - want.array()).abs().maxCoeff(), 1e-12);
  }
}

TEST(Conv2d, Linearity) {
  std::mt19937_64 rng(4);
  const ConvSpec s{3, 3, 2, 3, 1, Padding::same};
  const auto k = random_tensor(s.kernel_shape(), rng);
  const auto x = random_tensor(Shape{1, 5, 5, 2}, rng), y = random_tensor(Shape{1, 5, 5, 2}, rng);
  Tensor<double> mix(x.shape());
  mix.array() = 1.5 * x.array() - 0.25 * y.array();
  const auto lhs = conv2d(mix, k, s);
  Tensor<double> rhs(lhs.shape());
  rhs.array() = 1.5 * conv2d(x, k, s).array() - 0.25 * conv2d(y, k, s).array();
  EXPECT_LT((lhs.array() - rhs.array()).abs().maxCoeff(), 1e-6);
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  const ConvSpec s{1, 1, 3, 1, 1, Padding::same};
  try {
    conv2d(Tensor<double>(Shape{1, 2, 2, 2}), Tensor<double>(s.kernel_shape()), s);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.expected(), 3);
    EXPECT_EQ(e.actual(), 2);
    EXPECT_FALSE(e.axis().empty());
  }
}

TEST(Conv2dAt, BitwiseEqualToDenseAtSetPositions) {
  std::mt19937_64 rng(5);
  const ConvSpec s{3, 3, 4, 3, 1, Padding::same};
  const auto x = random_tensor(Shape{1, 6, 6, 4}, rng);
  const auto k = random_tensor(s.kernel_shape(), rng);
  ActiveMask m(6, 6);
  for (Index i = 0; i < 36; ++i) m(i / 6, i % 6) = (i * 7) % 3 == 0;
  const auto dense = conv2d(x, k, s);
  const auto sparse = conv2d_at(x, k, s, m);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j)
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(sparse(0, i, j, c), m(i, j) ? dense(0, i, j, c) : 0.0);
}

TEST(Pooling, GlobalAverage) {
  Tensor<double> t(Shape{1, 2, 2, 1});
  t.array() << 1, 2, 3, 4;
  const auto p = global_avg_pool(t);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(p[0], 2.5);
  const auto c = global_avg_pool(Tensor<double>(Shape{2, 3, 5, 4}, 0.7));
  EXPECT_EQ(c.shape(), (Shape{2, 1, 1, 4}));
  for (double v : c.values()) EXPECT_NEAR(v, 0.7, 1e-15);
}

TEST(Pooling, MaxPoolSameIgnoresPadding) {
  Tensor<double> t(Shape{1, 4, 4, 1}, -5.0);
  t(0, 3, 3, 0) = -1.0;
  const auto p = max_pool(t);
  EXPECT_EQ(p.shape(), (Shape{1, 2, 2, 1}));
  EXPECT_EQ(p(0, 0, 0, 0), -5.0);
  EXPECT_EQ(p(0, 1, 1, 0), -1.0);
}

TEST(Activations, ClosedForms) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(-3.0), 0.047425873, 1e-9);
  Tensor<double> t(Shape{1, 1, 1, 2});
  t[0] = -2.5;
  t[1] = 3.0;
  const auto r = relu(t);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 3.0);
}

TEST(BatchNorm, ConstantInputMapsToZero) {
  const Tensor<double> x(Shape{2, 3, 3, 2}, 4.0);
  const auto y = batch_norm<double>(x, Tensor<double>(Shape{1, 1, 1, 2}, 1.0), Tensor<double>(Shape{1, 1, 1, 2}), nullptr,
                            BnMode::train);
  for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(BatchNorm, TwoElementChannel) {
  Tensor<double> x(Shape{2, 1, 1, 1});
  x[0] = 0.0;
  x[1] = 2.0;
  const auto y = batch_norm<double>(x, Tensor<double>(Shape{1, 1, 1, 1}, 1.0), Tensor<double>(Shape{1, 1, 1, 1}), nullptr,
                            BnMode::train);
  EXPECT_NEAR(y[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, ZeroScaleGivesOffset) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor(Shape{2, 3, 3, 2}, rng);
  Tensor<double> offset(Shape{1, 1, 1, 2});
  offset[0] = 0.3;
  offset[1] = -1.2;
  const auto y = batch_norm<double>(x, Tensor<double>(Shape{1, 1, 1, 2}), offset, nullptr, BnMode::train);
  for (Index p = 0; p < y.shape().positions(); ++p) {
    EXPECT_EQ(y.row(p)[0], 0.3);
    EXPECT_EQ(y.row(p)[1], -1.2);
  }
}

TEST(BatchNorm, TrainOutputIsStandardized) {
  std::mt19937_64 rng(7);
  Tensor<double> x = random_tensor(Shape{4, 5, 5, 3}, rng, 3.0);
  x.array() += 2.0;
  const auto y = batch_norm<double>(x, Tensor<double>(Shape{1, 1, 1, 3}, 1.0), Tensor<double>(Shape{1, 1, 1, 3}), nullptr,
                            BnMode::train);
  const auto [mean, var] = batch_moments(y);
  for (Index c = 0; c < 3; ++c) {
    EXPECT_LT(std::abs(mean[c]), 1e-6);
    EXPECT_NEAR(var[c], 1.0, 1e-4);
  }
}

TEST(BatchNorm, RunningStatsUpdateAndInfer) {
  Tensor<double> x(Shape{2, 1, 1, 1});
  x[0] = 0.0;
  x[1] = 2.0;
  auto stats = RunningStats<double>::fresh(1);
  const Tensor<double> one(Shape{1, 1, 1, 1}, 1.0), zero(Shape{1, 1, 1, 1});
  batch_norm<double>(x, one, zero, &stats, BnMode::train);
  EXPECT_NEAR(stats.mean[0], 0.003 * 1.0, 1e-15);
  EXPECT_NEAR(stats.variance[0], 0.997 + 0.003 * 1.0, 1e-15);
  const auto y = batch_norm<double>(x, one, zero, &stats, BnMode::infer);
  EXPECT_NEAR(y[1], (2.0 - stats.mean[0]) / std::sqrt(stats.variance[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, InferWithoutStatsThrows) {
  RunningStats<double> empty;
  const Tensor<double> one(Shape{1, 1, 1, 1}, 1.0), zero(Shape{1, 1, 1, 1});
  EXPECT_THROW(batch_norm<double>(Tensor<double>(Shape{1, 1, 1, 1}), one, zero, &empty, BnMode::infer), std::logic_error);
  EXPECT_THROW(batch_norm<double>(Tensor<double>(Shape{1, 1, 1, 1}), one, zero, nullptr, BnMode::infer), std::logic_error);
}

TEST(DilateMask, CenterCornerAndEmpty) {
  ActiveMask m = ActiveMask::Constant(5, 5, false);
  m(2, 2) = true;
  const auto d = dilate_mask(m);
  EXPECT_EQ(d.count(), 9);
  EXPECT_TRUE(d(1, 1) && d(3, 3) && !d(0, 0));

  ActiveMask c = ActiveMask::Constant(4, 4, false);
  c(0, 0) = true;
  const auto dc = dilate_mask(c);
  EXPECT_EQ(dc.count(), 4);
  EXPECT_TRUE(dc(1, 1) && !dc(2, 2));

  EXPECT_EQ(dilate_mask(ActiveMask::Constant(3, 3, false)).count(), 0);
}
