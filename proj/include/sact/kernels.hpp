#pragma once

#include "sact/tensor.hpp"

#include <utility>

namespace sact {

enum class Padding { same, valid };

/// Geometry of one convolutional layer. Kernels are stored as Tensor[kh, kw, Cin, Cout].
struct ConvSpec {
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index in_channels = 1;
  Index out_channels = 1;
  Index stride = 1;
  Padding padding = Padding::same;

  /// `same`: ceil(in / stride); `valid`: floor((in - k) / stride) + 1.
  Index output_extent(Index in, Index kernel) const;
  /// Leading zero padding (TensorFlow convention: the odd pixel goes after).
  Index pad_before(Index in, Index kernel) const;
  Index output_height(Index in) const { return output_extent(in, kernel_h); }
  Index output_width(Index in) const { return output_extent(in, kernel_w); }
  Index fan_in() const { return kernel_h * kernel_w * in_channels; }
  Shape kernel_shape() const { return {kernel_h, kernel_w, in_channels, out_channels}; }

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Resolved sliding-window geometry for one input size.
struct ConvGeometry {
  Index in_h = 0, in_w = 0;
  Index out_h = 0, out_w = 0;
  Index pad_top = 0, pad_left = 0;

  static ConvGeometry make(const ConvSpec& spec, Index in_h, Index in_w);
};

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const ConvSpec& spec);

/// Convolution evaluated only at output positions where `where` is set; other outputs are zero.
/// Each computed output is bitwise identical to the corresponding conv2d output. The mask is
/// shared across the batch.
template <typename Scalar>
Tensor<Scalar> conv2d_at(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const ConvSpec& spec,
                         const ActiveMask& where);

/// Lowered input: one row per output position, kh*kw*Cin columns, zero where padded.
template <typename Scalar>
typename Tensor<Scalar>::RowMatrix im2col(const Tensor<Scalar>& input, const ConvSpec& spec,
                                          const ConvGeometry& geo);

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNormConfig {
  double epsilon = 1e-5;
  double decay = 0.997;
};

enum class BnMode { train, infer };

template <typename Scalar>
struct RunningStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> variance;

  bool initialized() const { return !mean.empty() && !variance.empty(); }
  static RunningStats fresh(Index channels) {
    return {Tensor<Scalar>(Shape{1, 1, 1, channels}, Scalar(0)), Tensor<Scalar>(Shape{1, 1, 1, channels}, Scalar(1))};
  }
};

/// Per-channel mean and biased variance over (batch, height, width).
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> batch_moments(const Tensor<Scalar>& input);

/// y = x * a + b with a = scale / sqrt(var + eps), b = offset - mean * a, evaluated per element.
template <typename Scalar>
Tensor<Scalar> batch_normalize(const Tensor<Scalar>& input, const Tensor<Scalar>& mean,
                               const Tensor<Scalar>& variance, const Tensor<Scalar>& scale,
                               const Tensor<Scalar>& offset, double epsilon);

/// Train mode normalizes with batch statistics and, when `stats` is non-null, folds them into
/// the moving averages. Infer mode reads `stats` and throws if they were never initialized.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& scale, const Tensor<Scalar>& offset,
                          RunningStats<Scalar>* stats, BnMode mode, const BatchNormConfig& config = {});

template <typename Scalar>
void update_running_stats(RunningStats<Scalar>& stats, const Tensor<Scalar>& mean, const Tensor<Scalar>& variance,
                          double decay);

// ---------------------------------------------------------------------------
// Elementwise and pooling

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);

template <typename Scalar>
Scalar sigmoid(Scalar t) {
  return Scalar(1) / (Scalar(1) + std::exp(-t));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input);

/// Max pooling with `same` padding; padded cells never win.
template <typename Scalar>
Tensor<Scalar> max_pool(const Tensor<Scalar>& input, Index window = 3, Index stride = 2);

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input);

/// Fully connected layer on (B,1,1,C) features: weight (1,1,C,K), bias (1,1,1,K) -> (B,1,1,K).
template <typename Scalar>
Tensor<Scalar> dense_layer(const Tensor<Scalar>& features, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

/// Position is set iff it or any 8-neighbour is set in `mask`; borders clip.
ActiveMask dilate_mask(const ActiveMask& mask);

}  // namespace sact
