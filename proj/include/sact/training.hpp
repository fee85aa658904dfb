#pragma once

#include "sact/io.hpp"
#include "sact/network.hpp"

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace sact {

struct LrSchedule {
  double initial = 0.05;
  double decay = 0.1;
  Index interval = 0;  // epochs between decays; 0 keeps the rate fixed

  double at(Index epoch) const;
};

enum class Precision { float32, float64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

struct TrainConfig {
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Index batch_size = 32;
  double tau = 0.0;
  double epsilon = 0.01;
  std::uint64_t seed = 0;
  Index epochs = 10;
  Precision precision = Precision::float32;
  /// Re-estimate BN moving averages over the training set after the last epoch.
  bool recalibrate_bn = true;

  void validate() const;
};

template <typename Scalar>
struct OptimizerState {
  std::map<std::string, Tensor<Scalar>> velocity;
};

/// g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v.
template <typename Scalar>
void sgd_momentum_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad, Tensor<Scalar>& velocity, double lr,
                       double momentum, double weight_decay);

/// Applies one step to every trainable tensor. Weight decay is applied to kernels only (conv,
/// fully connected, halting W and W~), never to BN parameters or biases.
template <typename Scalar>
void sgd_momentum_step(NetworkParams<Scalar>& params, const Tape<Scalar>& tape, OptimizerState<Scalar>& state,
                       double lr, double momentum, double weight_decay);

constexpr double kHaltingBiasInit = -3.0;

/// Variance-scaling normal init (std sqrt(2 / fan_in)) for every kernel, zero FC bias, identity
/// BN, halting biases -3.
template <typename Scalar>
NetworkParams<Scalar> initialize_network(const NetworkSpec& spec, std::uint64_t seed);

/// Backbone (everything except halting tensors) copied from `backbone`; halting tensors fresh.
template <typename Scalar>
NetworkParams<Scalar> initialize_two_stage(const NetworkSpec& spec, const Checkpoint& backbone, std::uint64_t seed);

/// Round half away from zero, clamp to [1, max_units[k]].
std::vector<Index> derive_baseline_units(std::span<const double> mean_units, std::span<const Index> max_units);

// ---------------------------------------------------------------------------

struct StepRecord {
  Index epoch = 0;
  Index step = 0;
  double task_loss = 0;
  double objective = 0;
  std::vector<double> ponder;  // batch mean per block
};

struct EpochRecord {
  Index epoch = 0;
  double loss = 0;               // mean task loss over the epoch's batches
  std::vector<double> ponder;    // mean per block
  std::vector<double> units;     // mean per block
  double accuracy = 0;           // training accuracy over the epoch
  double flops = 0;              // mean adaptive FLOPs per example
  std::vector<double> last_unit_fraction;  // per block: examples giving unit L_k nonzero weight
};

template <typename Scalar>
struct TrainResult {
  NetworkParams<Scalar> params;
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
};

/// Per-epoch metrics line: epoch, loss, ponder[k]..., units[k]..., acc, flops (tab separated).
std::string format_epoch(const EpochRecord& rec);
std::string format_dead_units(const EpochRecord& rec);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic given the seed. On a non-finite loss, throws NonFiniteLoss after `on_abort`
/// receives the last good parameters.
template <typename Scalar>
TrainResult<Scalar> train(NetworkParams<Scalar> params, const Dataset& data, const TrainConfig& config,
                          std::ostream* log = nullptr,
                          const std::function<void(const NetworkParams<Scalar>&)>& on_abort = {});

/// Re-estimates every BN moving average as the plain average of per-batch statistics.
template <typename Scalar>
void recalibrate_batch_norm(NetworkParams<Scalar>& params, const Dataset& data, Index batch_size);

struct EvalSummary {
  double accuracy = 0;
  std::vector<double> units;   // mean per block
  std::vector<double> ponder;  // mean per block
  double flops = 0;            // mean adaptive FLOPs per example
  Index count = 0;
};

template <typename Scalar>
EvalSummary evaluate(const NetworkParams<Scalar>& params, const Dataset& data, Index batch_size = 64);

}  // namespace sact
