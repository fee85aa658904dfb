#pragma once

#include "sact/autodiff.hpp"
#include "sact/sact.hpp"

#include <functional>
#include <string>
#include <vector>

namespace sact {

template <typename Scalar>
struct BlockParams {
  std::vector<ResidualUnitParams<Scalar>> units;
  /// Units 1..L-1. `spatial` is empty unless the network uses SACT.
  std::vector<SactHaltingParams<Scalar>> halting;

  std::vector<HaltingUnitParams<Scalar>> act_halting() const;
};

/// Stem conv (+ max-pool), K blocks, final BN + ReLU, global pool, fully connected logits.
template <typename Scalar>
struct NetworkParams {
  NetworkSpec spec;
  ConvLayer<Scalar> stem;
  std::vector<BlockParams<Scalar>> blocks;
  BatchNormLayer<Scalar> postnorm;
  Tensor<Scalar> fc_weight;  // (1,1,C,K)
  Tensor<Scalar> fc_bias;    // (1,1,1,K)

  /// All kernels zero, BN layers identity, running stats (0, 1).
  static NetworkParams zeros(const NetworkSpec& spec);
};

enum class ParamKind {
  weight,        // conv / fully connected / halting kernels: decayed
  bias,          // fully connected bias
  norm,          // BN scale / offset
  halting_bias,  // b^l
  running_stat,  // BN moving averages, not trained
};

bool is_trainable(ParamKind kind);
bool is_halting(const std::string& name);

template <typename Scalar>
using ParamVisitor = std::function<void(const std::string& name, Tensor<Scalar>& tensor, ParamKind kind)>;
template <typename Scalar>
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor<Scalar>& tensor, ParamKind kind)>;

/// Visits every tensor in a fixed order with names such as "block2/unit1/conv2/kernel".
template <typename Scalar>
void for_each_parameter(NetworkParams<Scalar>& params, const ParamVisitor<Scalar>& visit);
template <typename Scalar>
void for_each_parameter(const NetworkParams<Scalar>& params, const ConstParamVisitor<Scalar>& visit);

// ---------------------------------------------------------------------------
// Inference

template <typename Scalar>
struct NetworkOutput {
  Tensor<Scalar> logits;
  std::vector<std::vector<Scalar>> ponder;        // [block][example]
  std::vector<std::vector<double>> units;         // [block][example]: N, or mean N_ij for SACT
  std::vector<std::vector<PonderMap<Scalar>>> maps;  // [block][example], SACT only
  std::vector<EvaluationRecord> records;          // [example]
};

template <typename Scalar>
struct ForwardOptions {
  /// Optional per-block hooks (indexed by block, 0-based).
  const std::vector<BlockHooks<Scalar>>* hooks = nullptr;
};

/// Running-statistics forward pass that runs the halting rules per example.
template <typename Scalar>
NetworkOutput<Scalar> network_forward(const NetworkParams<Scalar>& params, const Tensor<Scalar>& images,
                                      const ForwardOptions<Scalar>& options = {});

// ---------------------------------------------------------------------------
// Differentiable batched graph

template <typename Scalar>
struct TrainingGraph {
  Var logits;
  Var task_loss;
  Var penalty;    // sum over blocks of the batch-mean ponder cost
  Var objective;  // task_loss + tau * penalty
  std::vector<Var> block_ponder;                 // (B,1,1,1) per block
  std::vector<std::vector<double>> units;        // [block][example]
  std::vector<EvaluationRecord> records;         // [example]
  std::vector<std::vector<bool>> reached_last;   // [block][example]: unit L_k got nonzero weight
  double halting_margin = std::numeric_limits<double>::infinity();
  std::vector<bool> pattern;
  std::vector<bool> kinks;  // sign of every ReLU input, when requested
};

struct GraphOptions {
  BnMode bn = BnMode::train;
  bool update_running_stats = false;
  BatchNormConfig norm;
  double tau = 0.0;
  bool record_kinks = false;
};

/// Dense batched evaluation in which every halting comparison becomes a constant mask, so the
/// recorded function has the piecewise gradient of the halting rules. In infer BN mode the values
/// match network_forward exactly.
template <typename Scalar>
TrainingGraph<Scalar> build_training_graph(Tape<Scalar>& tape, NetworkParams<Scalar>& params,
                                           const Tensor<Scalar>& images, const std::vector<Index>& labels,
                                           const GraphOptions& options);

}  // namespace sact
