#include "helpers.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace sact;
using sact::testing::random_tensor;
using sact::testing::random_unit;

namespace {

struct Block {
  std::vector<ResidualUnitParams<double>> units;
  std::vector<HaltingUnitParams<double>> halting;
};

Block make_block(std::mt19937_64& rng, Index units, Index channels = 4) {
  Block b;
  for (Index l = 0; l < units; ++l) b.units.push_back(random_unit(rng, channels, 2, channels, 1));
  b.halting.assign(static_cast<std::size_t>(units - 1), HaltingUnitParams<double>::zeros(channels));
  return b;
}

BlockHooks<double> pin_scores(std::vector<double> scores) {
  BlockHooks<double> h;
  h.override_scores = [scores](Index l, Field<double>& s) { s.setConstant(scores[static_cast<std::size_t>(l - 1)]); };
  return h;
}

}  // namespace

TEST(ActHalting, ZeroWeightsGiveSigmoidOfBias) {
  std::mt19937_64 rng(1);
  auto h = HaltingUnitParams<double>::zeros(5);
  const auto x = random_tensor(Shape{3, 4, 4, 5}, rng);
  for (double s : act_halting_score(x, h)) EXPECT_EQ(s, 0.5);
  h.bias[0] = -3.0;
  for (double s : act_halting_score(x, h)) EXPECT_DOUBLE_EQ(s, 1.0 / (1.0 + std::exp(3.0)));
}

TEST(ActHalting, UsesPooledFeatures) {
  auto h = HaltingUnitParams<double>::zeros(2);
  h.weight.array() << 1.0, -2.0;
  Tensor<double> x(Shape{1, 2, 1, 2});
  x.array() << 1.0, 0.0, 3.0, 1.0;  // pooled (2, 0.5)
  EXPECT_DOUBLE_EQ(act_halting_score(x, h)[0], 1.0 / (1.0 + std::exp(-1.0)));
}

TEST(ActBlock, WorkedExample) {
  std::mt19937_64 rng(2);
  const auto b = make_block(rng, 5);
  const auto hooks = pin_scores({0.1, 0.05, 0.25, 0.9});
  const auto r = act_block_forward<double>(random_tensor(Shape{1, 4, 4, 4}, rng), b.units, b.halting, 0.01, &hooks);
  EXPECT_EQ(r.units[0], 4);
  EXPECT_DOUBLE_EQ(r.remainder[0], 0.6);
  EXPECT_DOUBLE_EQ(r.ponder[0], 4.6);
  const std::vector<double> p = {0.1, 0.05, 0.25, 0.6, 0.0};
  for (std::size_t l = 0; l < 5; ++l) EXPECT_DOUBLE_EQ(r.distribution[0][l], p[l]);
}

TEST(ActBlock, OutputIsHaltingWeightedSumOfStates) {
  std::mt19937_64 rng(3);
  const auto b = make_block(rng, 4);
  const auto hooks = pin_scores({0.3, 0.2, 0.4});
  const auto x = random_tensor(Shape{1, 3, 3, 4}, rng);
  const auto r = act_block_forward<double>(x, b.units, b.halting, 0.01, &hooks);
  Tensor<double> state = x, want(x.shape());
  for (std::size_t l = 0; l < 4; ++l) {
    state = residual_unit_forward(state, b.units[l]);
    want.array() += r.distribution[0][l] * state.array();
  }
  EXPECT_LT((r.output.array() - want.array()).abs().maxCoeff(), 1e-12);
}

TEST(ActBlock, FirstUnitHalts) {
  std::mt19937_64 rng(4);
  const auto b = make_block(rng, 3);
  Index calls = 0;
  auto hooks = pin_scores({0.995, 0.5});
  hooks.on_unit = [&](Index) { ++calls; };
  const auto x = random_tensor(Shape{1, 3, 3, 4}, rng);
  const auto r = act_block_forward<double>(x, b.units, b.halting, 0.01, &hooks);
  EXPECT_EQ(r.units[0], 1);
  EXPECT_EQ(r.remainder[0], 1.0);
  EXPECT_EQ(r.ponder[0], 2.0);
  EXPECT_EQ(calls, 1);  // later units are never evaluated
  EXPECT_TRUE(r.output.identical(residual_unit_forward(x, b.units[0])));
}

TEST(ActBlock, ZeroScoresUseEveryUnit) {
  std::mt19937_64 rng(5);
  for (Index L : {1, 2, 5}) {
    const auto b = make_block(rng, L);
    const auto hooks = pin_scores(std::vector<double>(static_cast<std::size_t>(L), 0.0));
    const auto r = act_block_forward<double>(random_tensor(Shape{2, 2, 2, 4}, rng), b.units, b.halting, 0.01, &hooks);
    for (std::size_t n = 0; n < 2; ++n) {
      EXPECT_EQ(r.units[n], L);
      EXPECT_EQ(r.ponder[n], static_cast<double>(L + 1));
    }
  }
}

TEST(ActBlock, DistributionIsNormalizedAndBounded) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  const auto b = make_block(rng, 6, 3);
  const auto x = random_tensor(Shape{1, 2, 2, 3}, rng);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(5);
    for (double& v : s) v = std::pow(u(rng), 3);
    const auto hooks = pin_scores(s);
    const double eps = 0.1 * u(rng);
    const auto r = act_block_forward<double>(x, b.units, b.halting, eps, &hooks);
    const auto& p = r.distribution[0];
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    for (double v : p) EXPECT_GE(v, 0.0);
    EXPECT_GE(r.units[0], 1);
    EXPECT_LE(r.units[0], 6);
    EXPECT_GT(r.remainder[0], 0.0);
    EXPECT_LE(r.remainder[0], 1.0);
    EXPECT_EQ(r.ponder[0], static_cast<double>(r.units[0]) + r.remainder[0]);
  }
}

TEST(ActBlock, EvaluationRecordCountsUnits) {
  std::mt19937_64 rng(7);
  const auto b = make_block(rng, 4);
  const auto hooks = pin_scores({0.5, 0.6, 0.1});
  const auto r = act_block_forward<double>(random_tensor(Shape{1, 3, 3, 4}, rng), b.units, b.halting, 0.01, &hooks);
  ASSERT_EQ(r.units[0], 2);
  Index evaluated = 0;
  for (const auto& e : r.evaluations[0]) evaluated += e.evaluated() ? 1 : 0;
  EXPECT_EQ(evaluated, 2);
}

TEST(ActBlock, RejectsBadArguments) {
  std::mt19937_64 rng(8);
  auto b = make_block(rng, 3);
  const auto x = random_tensor(Shape{1, 2, 2, 4}, rng);
  EXPECT_THROW(act_block_forward<double>(x, b.units, b.halting, 0.0, nullptr), std::invalid_argument);
  EXPECT_THROW(act_block_forward<double>(x, b.units, b.halting, 1.0, nullptr), std::invalid_argument);
  b.halting.pop_back();
  EXPECT_THROW(act_block_forward<double>(x, b.units, b.halting, 0.01, nullptr), std::invalid_argument);
}

TEST(PonderLoss, AddsWeightedSum) {
  const double ponders[] = {4.6, 3.0};
  EXPECT_DOUBLE_EQ(ponder_regularized_loss(1.0, ponders, 0.005), 1.038);
  EXPECT_EQ(ponder_regularized_loss(1.25, ponders, 0.0), 1.25);
  EXPECT_THROW(ponder_regularized_loss(1.0, ponders, -0.1), std::invalid_argument);
}
