#include "helpers.hpp"

#include "sact/flops.hpp"

#include <gtest/gtest.h>

using namespace sact;
using sact::testing::random_tensor;
using sact::testing::random_unit;

namespace {

// Straight-line re-implementation of a pre-activation bottleneck unit at one position at a time.
Tensor<double> oracle_unit(const Tensor<double>& x, const ResidualUnitParams<double>& u) {
  auto bnrelu = [](const Tensor<double>& t, const BatchNormLayer<double>& bn) {
    Tensor<double> y(t.shape());
    for (Index p = 0; p < t.shape().positions(); ++p)
      for (Index c = 0; c < t.channels(); ++c) {
        const double v = (t.row(p)[c] - bn.stats.mean[c]) / std::sqrt(bn.stats.variance[c] + 1e-5) * bn.scale[c] +
                         bn.offset[c];
        y.row(p)[c] = std::max(v, 0.0);
      }
    return y;
  };
  auto conv = [](const Tensor<double>& t, const ConvLayer<double>& l) {
    const ConvSpec& s = l.spec;
    const auto geo = ConvGeometry::make(s, t.height(), t.width());
    Tensor<double> y(Shape{t.batch(), geo.out_h, geo.out_w, s.out_channels});
    for (Index n = 0; n < t.batch(); ++n)
      for (Index i = 0; i < geo.out_h; ++i)
        for (Index j = 0; j < geo.out_w; ++j)
          for (Index o = 0; o < s.out_channels; ++o) {
            double acc = 0;
            for (Index a = 0; a < s.kernel_h; ++a)
              for (Index b = 0; b < s.kernel_w; ++b) {
                const Index r = i * s.stride + a - geo.pad_top, c = j * s.stride + b - geo.pad_left;
                if (r >= 0 && r < t.height() && c >= 0 && c < t.width())
                  for (Index ci = 0; ci < s.in_channels; ++ci) acc += t(n, r, c, ci) * l.kernel(a, b, ci, o);
              }
            y(n, i, j, o) = acc;
          }
    return y;
  };
  const auto pre = bnrelu(x, u.preact);
  auto r = conv(bnrelu(conv(bnrelu(conv(pre, u.reduce), u.mid), u.spatial), u.last), u.restore);
  const auto shortcut = u.projection ? conv(pre, *u.projection) : x;
  r.array() += shortcut.array();
  return r;
}

}  // namespace

TEST(ResidualUnit, ZeroKernelsGiveExactIdentity) {
  std::mt19937_64 rng(1);
  auto u = random_unit(rng, 8, 2, 8, 1);
  u.reduce.kernel.array().setZero();
  u.spatial.kernel.array().setZero();
  u.restore.kernel.array().setZero();
  const auto x = random_tensor(Shape{2, 5, 5, 8}, rng);
  EXPECT_TRUE(residual_unit_forward(x, u).identical(x));
}

TEST(ResidualUnit, StrideTwoHalvesAndWidens) {
  std::mt19937_64 rng(2);
  const auto u = random_unit(rng, 4, 2, 8, 2);
  ASSERT_TRUE(u.projection.has_value());
  const auto y = residual_unit_forward(random_tensor(Shape{1, 8, 8, 4}, rng), u);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 4, 8}));
}

TEST(ResidualUnit, MatchesStraightLineOracle) {
  std::mt19937_64 rng(3);
  for (const auto& [in, out, stride] : {std::tuple{6, 6, 1}, std::tuple{4, 8, 2}, std::tuple{4, 6, 1}}) {
    const auto u = random_unit(rng, in, 2, out, stride);
    const auto x = random_tensor(Shape{2, 6, 5, in}, rng);
    const auto got = residual_unit_forward(x, u);
    const auto want = oracle_unit(x, u);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT((got.array() - want.array()).abs().maxCoeff(), 1e-10);
  }
}

TEST(ResidualUnit, ChannelMismatchThrows) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(residual_unit_forward(random_tensor(Shape{1, 4, 4, 3}, rng), random_unit(rng, 4, 2, 4, 1)),
               DimensionError);
}

TEST(Perforated, AllActiveEqualsDense) {
  std::mt19937_64 rng(5);
  const auto u = random_unit(rng, 4, 2, 4, 1);
  const auto x = random_tensor(Shape{1, 6, 6, 4}, rng);
  EXPECT_TRUE(perforated_residual_apply(x, u, ActiveMask::Constant(6, 6, true)).identical(residual_unit_forward(x, u)));
}

TEST(Perforated, AllInactiveCopiesInput) {
  std::mt19937_64 rng(6);
  const auto u = random_unit(rng, 4, 2, 4, 1);
  const auto x = random_tensor(Shape{1, 6, 6, 4}, rng);
  PerforationCounts counts;
  EXPECT_TRUE(perforated_residual_apply(x, u, ActiveMask::Constant(6, 6, false), &counts).identical(x));
  EXPECT_EQ(counts.first_layer_positions, 0);
  EXPECT_EQ(counts.active_positions, 0);
}

TEST(Perforated, CheckerboardMatchesDenseThenMerge) {
  std::mt19937_64 rng(7);
  const auto u = random_unit(rng, 4, 2, 4, 1);
  const auto x = random_tensor(Shape{1, 6, 6, 4}, rng);
  ActiveMask m(6, 6);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) m(i, j) = (i + j) % 2 == 0;
  const auto dense = residual_unit_forward(x, u);
  Tensor<double> want = x;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j)
      if (m(i, j)) want.row(x.position(0, i, j)) = dense.row(x.position(0, i, j));
  EXPECT_TRUE(perforated_residual_apply(x, u, m).identical(want));
}

TEST(Perforated, StridedUnitUnsupported) {
  std::mt19937_64 rng(8);
  const auto u = random_unit(rng, 4, 2, 8, 2);
  EXPECT_THROW(perforated_residual_apply(random_tensor(Shape{1, 4, 4, 4}, rng), u, ActiveMask::Constant(4, 4, true)),
               UnsupportedConfiguration);
}

TEST(Perforated, DilationSetIsMinimal) {
  // Dropping any dilated-only position from the first layer's evaluation set changes an active
  // output: its reduce-conv value feeds the 3x3 conv at the active neighbour.
  std::mt19937_64 rng(9);
  auto u = random_unit(rng, 4, 2, 4, 1);
  // Non-negative kernels and centred BN layers with positive offsets keep every bottleneck
  // activation above the ReLU floor, so no dependency is masked.
  for (auto* k : {&u.reduce.kernel, &u.spatial.kernel, &u.restore.kernel}) k->array() = k->array().abs();
  for (auto* bn : {&u.preact, &u.mid, &u.last}) {
    bn->stats.mean.array() = 0.0;
    bn->offset.array() = 1.0;
  }
  auto x = random_tensor(Shape{1, 5, 5, 4}, rng);
  x.array() = x.array().abs();
  ActiveMask m = ActiveMask::Constant(5, 5, false);
  m(2, 2) = true;
  const ActiveMask dilated = dilate_mask(m);
  const auto full = detail::perforated_residual_apply(x, u, m, dilated, nullptr);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) {
      if (!dilated(i, j) || m(i, j)) continue;
      ActiveMask shrunk = dilated;
      shrunk(i, j) = false;
      const auto y = detail::perforated_residual_apply(x, u, m, shrunk, nullptr);
      EXPECT_NE(y.row(x.position(0, 2, 2)), full.row(x.position(0, 2, 2))) << "dropped (" << i << "," << j << ")";
    }
}

TEST(ClassifierHead, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(10);
  Tensor<double> bias(Shape{1, 1, 1, 3});
  bias.array() << 0.5, -1.0, 2.0;
  const auto logits = classifier_head(random_tensor(Shape{2, 3, 3, 4}, rng), Tensor<double>(Shape{1, 1, 4, 3}), bias);
  for (Index n = 0; n < 2; ++n) EXPECT_EQ(logits.row(n), bias.row(0));
}

TEST(ClassifierHead, OneByOneInputIsAffine) {
  Tensor<double> x(Shape{1, 1, 1, 3});
  x.array() << 1.0, 2.0, 3.0;
  Tensor<double> w(Shape{1, 1, 3, 2});
  w.array() << 1, 0,  //
      0, 2,           //
      1, 1;
  Tensor<double> b(Shape{1, 1, 1, 2});
  b.array() << 0.5, -0.5;
  const auto y = classifier_head(x, w, b);
  EXPECT_EQ(y[0], 1.0 + 3.0 + 0.5);
  EXPECT_EQ(y[1], 4.0 + 3.0 - 0.5);
}

TEST(Config, RoundTrip) {
  for (NetworkSpec spec : {desk_spec(), resnet50_spec(), resnet101_spec()}) {
    spec.halting = HaltingMode::sact;
    spec.tau = 0.005;
    spec.tile = 2;
    EXPECT_EQ(parse_config(format_config(spec)), spec);
  }
}

TEST(Config, ParsesDocumentedKeysAndRejectsUnknown) {
  const auto spec = parse_config("blocks=2\nblock1.units=3\nblock1.channels=16\nblock2.units=4\nblock2.channels=32\n"
                                 "halting=act # comment\ntau=0.01\nepsilon=0.02\n");
  EXPECT_EQ(spec.blocks.size(), 2u);
  EXPECT_EQ(spec.blocks[1].units, 4);
  EXPECT_EQ(spec.blocks[1].stride, 2);
  EXPECT_EQ(spec.blocks[1].bottleneck, 8);
  EXPECT_EQ(spec.halting, HaltingMode::act);
  EXPECT_EQ(spec.tau, 0.01);
  EXPECT_THROW(parse_config("blocks=1\nblock1.units=1\nblock1.channels=8\nwidth=3\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("blocks=1\nblock1.units=x\nblock1.channels=8\n"), std::invalid_argument);
}

TEST(Flops, SingleConvFormula) {
  EXPECT_EQ(conv_flops(56 * 56, ConvSpec{3, 3, 64, 64, 1, Padding::same}), 231211008);
}

TEST(Flops, ReferenceArchitectures) {
  EXPECT_NEAR(static_cast<double>(count_flops(resnet50_spec(), 224).total()), 8.18e9, 0.02 * 8.18e9);
  EXPECT_NEAR(static_cast<double>(count_flops(resnet101_spec(), 224).total()), 1.56e10, 0.02 * 1.56e10);
  EXPECT_NEAR(static_cast<double>(count_flops(resnet101_spec(), 352).total()), 3.85e10, 0.02 * 3.85e10);
}

TEST(Flops, TotalIsSumOfParts) {
  const auto b = count_flops(resnet50_spec(), 224);
  std::int64_t sum = b.stem;
  for (const auto& blk : b.blocks)
    for (const auto& u : blk.units) sum += u.total();
  EXPECT_EQ(b.total(), sum);
  EXPECT_GT(b.aux(), 0);
}

TEST(Flops, MonotoneInResolutionUnitsAndWidth) {
  const NetworkSpec base = desk_spec();
  EXPECT_LT(count_flops(base, 32).total(), count_flops(base, 64).total());
  NetworkSpec deeper = base;
  deeper.blocks[2].units += 1;
  EXPECT_LT(count_flops(base, 32).total(), count_flops(deeper, 32).total());
  NetworkSpec wider = base;
  wider.blocks[1].channels *= 2;
  EXPECT_LT(count_flops(base, 32).total(), count_flops(wider, 32).total());
}

TEST(Flops, DenseRecordEqualsStaticCount) {
  for (NetworkSpec spec : {desk_spec(), resnet101_spec()}) {
    const auto dense = count_flops(spec, 64);
    EXPECT_EQ(count_flops_adaptive(spec, dense_record(spec, 64, 64), 64, 64).total(), dense.total());
  }
}

TEST(Flops, SkippedUnitsCostNothing) {
  const NetworkSpec spec = desk_spec();
  auto rec = dense_record(spec, 32, 32);
  const auto dense = count_flops(spec, 32);
  rec.blocks[1].back() = UnitEvaluation{};
  const auto adaptive = count_flops_adaptive(spec, rec, 32, 32);
  EXPECT_EQ(adaptive.total(), dense.total() - dense.blocks[1].units.back().total());
}

TEST(Flops, HalfActiveInteriorBlobHalvesLaterLayers) {
  NetworkSpec spec = desk_spec();
  spec.halting = HaltingMode::sact;
  const auto res = block_resolutions(spec, 64, 64);
  const Index positions = res[0].first * res[0].second;  // 16 x 16 block-one grid
  auto rec = dense_record(spec, 64, 64);
  auto& unit = rec.blocks[0][1];
  unit.active_positions = positions / 2;
  unit.first_layer_positions = positions / 2 + 16;  // blob plus its dilation ring
  const auto dense = count_flops(spec, 64).blocks[0].units[1];
  const auto half = count_flops_adaptive(spec, rec, 64, 64).blocks[0].units[1];
  EXPECT_EQ(2 * half.spatial, dense.spatial);
  EXPECT_EQ(2 * half.restore, dense.restore);
  EXPECT_EQ(half.reduce, dense.reduce / positions * (positions / 2 + 16));
}
