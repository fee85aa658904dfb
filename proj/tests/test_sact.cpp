#include "helpers.hpp"

#include <gtest/gtest.h>

using namespace sact;
using sact::testing::random_tensor;
using sact::testing::random_unit;

namespace {

struct Block {
  std::vector<ResidualUnitParams<double>> units;
  std::vector<SactHaltingParams<double>> halting;
};

Block make_block(std::mt19937_64& rng, Index units, Index channels = 4, bool random_halting = false) {
  Block b;
  for (Index l = 0; l < units; ++l) b.units.push_back(random_unit(rng, channels, 2, channels, 1));
  for (Index l = 0; l + 1 < units; ++l) {
    auto h = SactHaltingParams<double>::zeros(channels);
    if (random_halting) {
      h.spatial = random_tensor(h.spatial.shape(), rng, 0.3);
      h.pooled.weight = random_tensor(h.pooled.weight.shape(), rng, 0.3);
      h.pooled.bias[0] = -0.5;
    }
    b.halting.push_back(h);
  }
  return b;
}

std::vector<HaltingUnitParams<double>> pooled_only(const Block& b) {
  std::vector<HaltingUnitParams<double>> out;
  for (const auto& h : b.halting) out.push_back(h.pooled);
  return out;
}

}  // namespace

TEST(SactScores, ZeroSpatialKernelMatchesPooledScore) {
  std::mt19937_64 rng(1);
  auto h = SactHaltingParams<double>::zeros(4);
  h.pooled.weight = random_tensor(h.pooled.weight.shape(), rng);
  h.pooled.bias[0] = 0.3;
  const auto x = random_tensor(Shape{2, 5, 4, 4}, rng);
  const auto field = sact_halting_scores(x, h);
  const auto pooled = act_halting_score(x, h.pooled);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 4; ++j) EXPECT_EQ(field(n, i, j, 0), pooled[static_cast<std::size_t>(n)]);
}

TEST(SactScores, OneByOneInputEqualsActScoreWithCenterTap) {
  std::mt19937_64 rng(2);
  auto h = SactHaltingParams<double>::zeros(3);
  h.spatial = random_tensor(h.spatial.shape(), rng);
  const auto x = random_tensor(Shape{1, 1, 1, 3}, rng);
  auto act = h.pooled;
  for (Index c = 0; c < 3; ++c) act.weight[c] += h.spatial(1, 1, c, 0);
  EXPECT_NEAR(sact_halting_scores(x, h)[0], act_halting_score(x, act)[0], 1e-15);
}

TEST(SactBlock, MatchesActWhenSpatialKernelIsZero) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    auto b = make_block(rng, 4, 4, true);
    for (auto& h : b.halting) h.spatial.array().setZero();
    const auto x = random_tensor(Shape{2, 4, 5, 4}, rng);
    const auto s = sact_block_forward<double>(x, b.units, b.halting, 0.01);
    const auto a = act_block_forward<double>(x, b.units, pooled_only(b), 0.01);
    EXPECT_TRUE(s.output.identical(a.output));
    for (std::size_t n = 0; n < 2; ++n) {
      EXPECT_EQ(s.ponder[n], a.ponder[n]);
      EXPECT_TRUE((s.states[n].units == a.units[n]).all());
    }
  }
}

TEST(SactBlock, OneByOneResolutionMatchesAct) {
  std::mt19937_64 rng(4);
  auto b = make_block(rng, 3, 4, true);
  const auto x = random_tensor(Shape{1, 1, 1, 4}, rng);
  std::vector<HaltingUnitParams<double>> act;
  for (const auto& h : b.halting) {
    auto p = h.pooled;
    for (Index c = 0; c < 4; ++c) p.weight[c] += h.spatial(1, 1, c, 0);
    act.push_back(p);
  }
  const auto s = sact_block_forward<double>(x, b.units, b.halting, 0.01);
  const auto a = act_block_forward<double>(x, b.units, act, 0.01);
  EXPECT_EQ(s.states[0].units(0, 0), a.units[0]);
  EXPECT_NEAR(s.ponder[0], a.ponder[0], 1e-12);
  EXPECT_LT((s.output.array() - a.output.array()).abs().maxCoeff(), 1e-12);
}

TEST(SactBlock, PonderIsMeanOfMap) {
  std::mt19937_64 rng(5);
  const auto b = make_block(rng, 4, 4, true);
  const auto r = sact_block_forward<double>(random_tensor(Shape{3, 6, 6, 4}, rng), b.units, b.halting, 0.01);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(r.ponder[n], r.map(n).mean());
    const auto& st = r.states[n];
    EXPECT_TRUE((st.ponder.values == st.units.cast<double>() + st.remainder).all());
  }
}

TEST(SactBlock, PositionsHaltIndependently) {
  std::mt19937_64 rng(6);
  const auto b = make_block(rng, 3);
  BlockHooks<double> hooks;
  hooks.override_scores = [](Index, Field<double>& s) {
    s.setZero();
    s(0, 0) = 0.995;  // one position halts at its first unit
  };
  const auto r = sact_block_forward<double>(random_tensor(Shape{1, 3, 3, 4}, rng), b.units, b.halting, 0.01, 1, &hooks);
  const auto& st = r.states[0];
  EXPECT_EQ(st.units(0, 0), 1);
  EXPECT_EQ(st.ponder.values(0, 0), 2.0);
  EXPECT_EQ(st.units(2, 2), 3);
  EXPECT_EQ(st.ponder.values(2, 2), 4.0);
  // The halted position still feeds its neighbours' 3x3 convs with its frozen features.
  EXPECT_EQ(r.evaluations[0][1].active_positions, 8);
  EXPECT_EQ(r.evaluations[0][1].first_layer_positions, 9);
}

TEST(SactBlock, StopsWhenEveryPositionHalted) {
  std::mt19937_64 rng(7);
  const auto b = make_block(rng, 4);
  Index calls = 0;
  BlockHooks<double> hooks;
  hooks.on_unit = [&](Index) { ++calls; };
  hooks.override_scores = [](Index l, Field<double>& s) { s.setConstant(l == 2 ? 0.7 : 0.3); };
  const auto r = sact_block_forward<double>(random_tensor(Shape{1, 4, 4, 4}, rng), b.units, b.halting, 0.01, 1, &hooks);
  EXPECT_EQ(calls, 2);
  EXPECT_TRUE((r.states[0].units == 2).all());
  EXPECT_EQ(r.evaluations[0].size(), 2u);  // trailing units are absent from the record
}

TEST(SactBlock, DistributionSumsToOne) {
  // With every unit equal to the identity the output equals sum_l p_ij^l * x_ij = x_ij.
  std::mt19937_64 rng(8);
  auto b = make_block(rng, 5, 3, true);
  for (auto& u : b.units) {
    u.reduce.kernel.array().setZero();
    u.spatial.kernel.array().setZero();
    u.restore.kernel.array().setZero();
  }
  const auto x = random_tensor(Shape{2, 5, 5, 3}, rng);
  const auto r = sact_block_forward<double>(x, b.units, b.halting, 0.05);
  EXPECT_LT((r.output.array() - x.array()).abs().maxCoeff(), 1e-12);
}

TEST(SactTiling, KOneIsIdentity) {
  std::mt19937_64 rng(9);
  Field<double> s = Field<double>::Random(5, 4);
  EXPECT_TRUE((tile_halting_scores(s, 1) == s).all());
}

TEST(SactTiling, TwoByTwoAverage) {
  Field<double> s(2, 2);
  s << 0.1, 0.3, 0.5, 0.7;
  const auto t = tile_halting_scores(s, 2);
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(t(i / 2, i % 2), 0.4);
}

TEST(SactTiling, RaggedEdgesUsePartialTiles) {
  Field<double> s(5, 5);
  for (Index i = 0; i < 25; ++i) s(i / 5, i % 5) = static_cast<double>(i);
  const auto t = tile_halting_scores(s, 2);
  EXPECT_DOUBLE_EQ(t(0, 0), (0 + 1 + 5 + 6) / 4.0);
  EXPECT_DOUBLE_EQ(t(4, 4), 24.0);
  EXPECT_DOUBLE_EQ(t(4, 0), (20 + 21) / 2.0);
  EXPECT_DOUBLE_EQ(t(0, 4), (4 + 9) / 2.0);
}

TEST(SactTiling, RejectsNonPositiveTile) {
  Field<double> s = Field<double>::Zero(2, 2);
  EXPECT_THROW(tile_halting_scores(s, 0), std::invalid_argument);
  EXPECT_THROW(tile_halting_scores(s, -1), std::invalid_argument);
}

TEST(SactTiling, TiledPositionsHaltTogether) {
  std::mt19937_64 rng(10);
  const auto b = make_block(rng, 4, 4, true);
  const auto r = sact_block_forward<double>(random_tensor(Shape{1, 6, 6, 4}, rng), b.units, b.halting, 0.01, 3);
  const auto& units = r.states[0].units;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 6; ++j) EXPECT_EQ(units(i, j), units(i / 3 * 3, j / 3 * 3));
}

TEST(PonderMapMean, ConstantMapIsExact) {
  PonderMap<double> m{Field<double>::Constant(7, 3, 2.1), 0};
  EXPECT_EQ(m.mean(), 2.1);
}
