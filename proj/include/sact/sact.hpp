#pragma once

#include "sact/act.hpp"

namespace sact {

/// H^l(x)_ij = sigmoid((W~ * x)_ij + W . pool(x) + b). spatial: (3,3,C,1).
template <typename Scalar>
struct SactHaltingParams {
  Tensor<Scalar> spatial;
  HaltingUnitParams<Scalar> pooled;

  static SactHaltingParams zeros(Index channels) {
    return {Tensor<Scalar>(Shape{3, 3, channels, 1}), HaltingUnitParams<Scalar>::zeros(channels)};
  }
  static ConvSpec conv_spec(Index channels) { return ConvSpec{3, 3, channels, 1, 1, Padding::same}; }
};

/// rho_ij at one block's resolution.
template <typename Scalar>
struct PonderMap {
  Field<Scalar> values;
  Index block = 0;

  /// Arithmetic mean, accumulated relative to the first entry so a constant map returns that
  /// constant exactly.
  Scalar mean() const;
};

using CountField = Eigen::Array<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Spatial halting state for one example after the block finishes.
template <typename Scalar>
struct SactBlockState {
  ActiveMask active;
  Field<Scalar> cumulative;
  Field<Scalar> remainder;
  PonderMap<Scalar> ponder;
  CountField units;  // N_ij
  Tensor<Scalar> output;
};

template <typename Scalar>
struct SactBlockResult {
  Tensor<Scalar> output;
  std::vector<Scalar> ponder;  // spatial mean of the ponder map, per example
  std::vector<SactBlockState<Scalar>> states;
  std::vector<std::vector<UnitEvaluation>> evaluations;

  const PonderMap<Scalar>& map(std::size_t example) const { return states[example].ponder; }
};

/// Score field (B,H,W,1). When `where` is given, the 3x3 term is evaluated only at set positions
/// and other entries are left at zero.
template <typename Scalar>
Tensor<Scalar> sact_halting_scores(const Tensor<Scalar>& x, const SactHaltingParams<Scalar>& params,
                                   const ActiveMask* where = nullptr);

/// Average over k x k tiles (partial tiles at ragged edges), broadcast back to every member.
template <typename Scalar>
Field<Scalar> tile_halting_scores(const Field<Scalar>& scores, Index k);

/// Spatially adaptive halting per example. Units after the first must be stride-1 without projection.
template <typename Scalar>
SactBlockResult<Scalar> sact_block_forward(const Tensor<Scalar>& input,
                                           std::span<const ResidualUnitParams<Scalar>> units,
                                           std::span<const SactHaltingParams<Scalar>> halting, double epsilon,
                                           Index tile = 1, const BlockHooks<Scalar>* hooks = nullptr);

template <typename Scalar>
Field<Scalar> field_of(const Tensor<Scalar>& t, Index example, Index channel = 0);

}  // namespace sact
