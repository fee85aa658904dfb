#pragma once

#include "sact/kernels.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sact {

enum class HaltingMode { none, act, sact };

std::string_view to_string(HaltingMode mode);
HaltingMode parse_halting_mode(std::string_view text);

struct BlockSpec {
  Index units = 1;
  Index channels = 16;    // unit output width
  Index bottleneck = 4;   // width of the 1x1 / 3x3 / 1x1 residual function
  Index stride = 1;       // stride of the block's first unit

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

/// Stem (conv + optional max-pool) followed by K blocks of bottleneck residual units.
struct NetworkSpec {
  Index input_channels = 3;
  Index stem_channels = 16;
  Index stem_kernel = 7;
  Index stem_stride = 2;
  bool stem_pool = true;
  std::vector<BlockSpec> blocks;
  HaltingMode halting = HaltingMode::none;
  double epsilon = 0.01;
  double tau = 0.0;
  Index classes = 4;
  Index tile = 1;

  void validate() const;
  ConvSpec stem_conv() const;
  /// Input channel count of unit `unit` (0-based) of block `block` (0-based).
  Index unit_input_channels(std::size_t block, std::size_t unit) const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Desk-scale default: stem 16, blocks (2,2,2,2) with widths (16,32,64,128), 32x32 input.
NetworkSpec desk_spec();
NetworkSpec resnet50_spec();
NetworkSpec resnet101_spec();

/// Line-oriented `key=value` text; see README for the grammar.
std::string format_config(const NetworkSpec& spec);
NetworkSpec parse_config(std::string_view text);
NetworkSpec load_config(const std::string& path);

// ---------------------------------------------------------------------------

template <typename Scalar>
struct ConvLayer {
  ConvSpec spec;
  Tensor<Scalar> kernel;
};

template <typename Scalar>
struct BatchNormLayer {
  Tensor<Scalar> scale;
  Tensor<Scalar> offset;
  RunningStats<Scalar> stats;

  static BatchNormLayer identity(Index channels) {
    return {Tensor<Scalar>(Shape{1, 1, 1, channels}, Scalar(1)), Tensor<Scalar>(Shape{1, 1, 1, channels}, Scalar(0)),
            RunningStats<Scalar>::fresh(channels)};
  }
};

template <typename Scalar>
Tensor<Scalar> bn_relu_infer(const Tensor<Scalar>& x, const BatchNormLayer<Scalar>& bn,
                             const BatchNormConfig& config = {});

/// Pre-activation bottleneck unit F(x) = x + f(x). Every conv is preceded by BN + ReLU; the
/// projection shortcut (stride or width change) reads the first BN + ReLU output.
template <typename Scalar>
struct ResidualUnitParams {
  BatchNormLayer<Scalar> preact;
  ConvLayer<Scalar> reduce;    // 1x1
  BatchNormLayer<Scalar> mid;
  ConvLayer<Scalar> spatial;   // 3x3, carries the unit stride
  BatchNormLayer<Scalar> last;
  ConvLayer<Scalar> restore;   // 1x1
  std::optional<ConvLayer<Scalar>> projection;

  Index stride() const { return spatial.spec.stride; }
  Index in_channels() const { return reduce.spec.in_channels; }
  Index out_channels() const { return restore.spec.out_channels; }

  /// Zero-valued unit with fresh BN layers; shapes from the block geometry.
  static ResidualUnitParams zeros(Index in_channels, Index bottleneck, Index out_channels, Index stride);
};

/// Inference-mode (running-statistics) unit evaluation.
template <typename Scalar>
Tensor<Scalar> residual_unit_forward(const Tensor<Scalar>& x, const ResidualUnitParams<Scalar>& unit);

struct PerforationCounts {
  Index first_layer_positions = 0;  // 1x1 reduce conv, dilated active set
  Index active_positions = 0;       // 3x3 and 1x1 restore convs
};

/// Residual unit evaluated only at active positions; inactive positions copy x_hat. The reduce
/// conv runs on the 3x3-dilated active set, the other two convs on the active set only.
template <typename Scalar>
Tensor<Scalar> perforated_residual_apply(const Tensor<Scalar>& x_hat, const ResidualUnitParams<Scalar>& unit,
                                         const ActiveMask& mask, PerforationCounts* counts = nullptr);

namespace detail {
/// As perforated_residual_apply, but with an explicit evaluation set for the reduce conv.
template <typename Scalar>
Tensor<Scalar> perforated_residual_apply(const Tensor<Scalar>& x_hat, const ResidualUnitParams<Scalar>& unit,
                                         const ActiveMask& mask, const ActiveMask& first_layer_set,
                                         PerforationCounts* counts);
}  // namespace detail

/// Global average pool followed by a fully connected layer. weight: (1,1,C,K), bias: (1,1,1,K).
template <typename Scalar>
Tensor<Scalar> classifier_head(const Tensor<Scalar>& features, const Tensor<Scalar>& weight,
                               const Tensor<Scalar>& bias);

}  // namespace sact
