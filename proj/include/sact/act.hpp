#pragma once

#include "sact/flops.hpp"
#include "sact/residual.hpp"

#include <functional>
#include <span>
#include <vector>

namespace sact {

/// H^l(x) = sigmoid(W . pool(x) + b). weight: (1,1,C,1), bias: (1,1,1,1).
template <typename Scalar>
struct HaltingUnitParams {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  static HaltingUnitParams zeros(Index channels) {
    return {Tensor<Scalar>(Shape{1, 1, channels, 1}), Tensor<Scalar>(Shape{1, 1, 1, 1})};
  }
};

/// Test and instrumentation hooks for block forward passes. Unit indices are 1-based.
template <typename Scalar>
struct BlockHooks {
  /// Called once per residual-unit evaluation.
  std::function<void(Index unit)> on_unit;
  /// May overwrite the halting scores of unit `unit` < L before they are accumulated. ACT passes a
  /// 1x1 field; SACT passes the block-resolution field (only active entries are read).
  std::function<void(Index unit, Field<Scalar>& scores)> override_scores;
};

/// Per-example results of one ACT block.
template <typename Scalar>
struct ActBlockResult {
  Tensor<Scalar> output;
  std::vector<Index> units;                       // N
  std::vector<Scalar> remainder;                  // R
  std::vector<std::vector<Scalar>> distribution;  // p^1..p^L, zero beyond N
  std::vector<Scalar> ponder;                     // rho = N + R
  std::vector<std::vector<UnitEvaluation>> evaluations;
};

/// One score per batch element.
template <typename Scalar>
std::vector<Scalar> act_halting_score(const Tensor<Scalar>& x, const HaltingUnitParams<Scalar>& params);

/// Pre-sigmoid halting logits W . pool(x) + b, shape (B,1,1,1).
template <typename Scalar>
Tensor<Scalar> pooled_halting_logits(const Tensor<Scalar>& x, const HaltingUnitParams<Scalar>& params);

/// Block-level adaptive halting per example. `halting` holds L-1 entries; unit L halts unconditionally.
template <typename Scalar>
ActBlockResult<Scalar> act_block_forward(const Tensor<Scalar>& input, std::span<const ResidualUnitParams<Scalar>> units,
                                         std::span<const HaltingUnitParams<Scalar>> halting, double epsilon,
                                         const BlockHooks<Scalar>* hooks = nullptr);

/// L' = L + tau * sum_k rho_k.
double ponder_regularized_loss(double task_loss, std::span<const double> block_ponders, double tau);

void check_block_arguments(const char* where, std::size_t units, std::size_t halting, double epsilon);

}  // namespace sact
