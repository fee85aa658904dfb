#include "sact/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sact {

Index ConvSpec::output_extent(Index in, Index kernel) const {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (in < kernel) return 0;
  return (in - kernel) / stride + 1;
}

Index ConvSpec::pad_before(Index in, Index kernel) const {
  if (padding == Padding::valid) return 0;
  const Index out = output_extent(in, kernel);
  const Index total = std::max<Index>((out - 1) * stride + kernel - in, 0);
  return total / 2;
}

ConvGeometry ConvGeometry::make(const ConvSpec& spec, Index in_h, Index in_w) {
  ConvGeometry g;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_h = spec.output_height(in_h);
  g.out_w = spec.output_width(in_w);
  g.pad_top = spec.pad_before(in_h, spec.kernel_h);
  g.pad_left = spec.pad_before(in_w, spec.kernel_w);
  return g;
}

namespace {

template <typename Scalar>
void check_conv_operands(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const ConvSpec& spec,
                         const char* where) {
  if (spec.kernel_h <= 0 || spec.kernel_w <= 0 || spec.stride <= 0 || spec.in_channels <= 0 ||
      spec.out_channels <= 0)
    throw std::invalid_argument(std::string(where) + ": ConvSpec extents must be positive");
  expect_axis(where, "kernel_h", spec.kernel_h, kernel.shape().batch);
  expect_axis(where, "kernel_w", spec.kernel_w, kernel.shape().height);
  expect_axis(where, "kernel_in_channels", spec.in_channels, kernel.shape().width);
  expect_axis(where, "kernel_out_channels", spec.out_channels, kernel.shape().channels);
  expect_axis(where, "channels", spec.in_channels, input.channels());
}

// Evaluates single output positions. Every caller (dense or masked) goes through eval(), so the
// per-position summation order never depends on which other positions are computed.
template <typename Scalar>
class PositionConv {
 public:
  using RowMatrix = typename Tensor<Scalar>::RowMatrix;

  PositionConv(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const ConvSpec& spec)
      : input_(input),
        spec_(spec),
        geo_(ConvGeometry::make(spec, input.height(), input.width())),
        weights_(kernel.data(), spec.fan_in(), spec.out_channels),
        patch_(spec.fan_in()) {}

  const ConvGeometry& geometry() const { return geo_; }

  void eval(Index n, Index oh, Index ow, Scalar* out) {
    const Index cin = spec_.in_channels;
    Scalar* dst = patch_.data();
    for (Index ky = 0; ky < spec_.kernel_h; ++ky) {
      const Index ih = oh * spec_.stride - geo_.pad_top + ky;
      for (Index kx = 0; kx < spec_.kernel_w; ++kx, dst += cin) {
        const Index iw = ow * spec_.stride - geo_.pad_left + kx;
        if (ih < 0 || ih >= geo_.in_h || iw < 0 || iw >= geo_.in_w) {
          std::fill(dst, dst + cin, Scalar(0));
        } else {
          const Scalar* src = input_.data() + input_.offset(n, ih, iw, 0);
          std::copy(src, src + cin, dst);
        }
      }
    }
    Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> result(out, spec_.out_channels);
    result.noalias() = patch_ * weights_;
  }

 private:
  const Tensor<Scalar>& input_;
  const ConvSpec& spec_;
  ConvGeometry geo_;
  Eigen::Map<const RowMatrix> weights_;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> patch_;
};

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const ConvSpec& spec) {
  check_conv_operands(input, kernel, spec, "conv2d");
  PositionConv<Scalar> conv(input, kernel, spec);
  const auto& g = conv.geometry();
  Tensor<Scalar> out(Shape{input.batch(), g.out_h, g.out_w, spec.out_channels});
  for (Index n = 0; n < input.batch(); ++n)
    for (Index oh = 0; oh < g.out_h; ++oh)
      for (Index ow = 0; ow < g.out_w; ++ow) conv.eval(n, oh, ow, out.data() + out.offset(n, oh, ow, 0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> conv2d_at(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel, const ConvSpec& spec,
                         const ActiveMask& where) {
  check_conv_operands(input, kernel, spec, "conv2d_at");
  PositionConv<Scalar> conv(input, kernel, spec);
  const auto& g = conv.geometry();
  expect_axis("conv2d_at", "mask_height", g.out_h, where.rows());
  expect_axis("conv2d_at", "mask_width", g.out_w, where.cols());
  Tensor<Scalar> out(Shape{input.batch(), g.out_h, g.out_w, spec.out_channels});
  for (Index n = 0; n < input.batch(); ++n)
    for (Index oh = 0; oh < g.out_h; ++oh)
      for (Index ow = 0; ow < g.out_w; ++ow)
        if (where(oh, ow)) conv.eval(n, oh, ow, out.data() + out.offset(n, oh, ow, 0));
  return out;
}

template <typename Scalar>
typename Tensor<Scalar>::RowMatrix im2col(const Tensor<Scalar>& input, const ConvSpec& spec,
                                          const ConvGeometry& g) {
  const Index cin = spec.in_channels;
  typename Tensor<Scalar>::RowMatrix cols(input.batch() * g.out_h * g.out_w, spec.fan_in());
  Index r = 0;
  for (Index n = 0; n < input.batch(); ++n)
    for (Index oh = 0; oh < g.out_h; ++oh)
      for (Index ow = 0; ow < g.out_w; ++ow, ++r) {
        Scalar* dst = cols.data() + r * cols.cols();
        for (Index ky = 0; ky < spec.kernel_h; ++ky) {
          const Index ih = oh * spec.stride - g.pad_top + ky;
          for (Index kx = 0; kx < spec.kernel_w; ++kx, dst += cin) {
            const Index iw = ow * spec.stride - g.pad_left + kx;
            if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) {
              std::fill(dst, dst + cin, Scalar(0));
            } else {
              const Scalar* src = input.data() + input.offset(n, ih, iw, 0);
              std::copy(src, src + cin, dst);
            }
          }
        }
      }
  return cols;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> batch_moments(const Tensor<Scalar>& input) {
  const Index c = input.channels();
  const Index count = input.shape().positions();
  if (count == 0) throw DimensionError("batch_moments", "positions", 1, 0);
  const auto m = input.matrix();
  Tensor<Scalar> mean(Shape{1, 1, 1, c});
  Tensor<Scalar> var(Shape{1, 1, 1, c});
  mean.row(0) = m.colwise().sum() / Scalar(count);
  var.row(0) = (m.rowwise() - mean.row(0)).array().square().colwise().sum().matrix() / Scalar(count);
  return {std::move(mean), std::move(var)};
}

template <typename Scalar>
Tensor<Scalar> batch_normalize(const Tensor<Scalar>& input, const Tensor<Scalar>& mean, const Tensor<Scalar>& variance,
                               const Tensor<Scalar>& scale, const Tensor<Scalar>& offset, double epsilon) {
  const Index c = input.channels();
  expect_axis("batch_norm", "scale_channels", c, scale.size());
  expect_axis("batch_norm", "offset_channels", c, offset.size());
  expect_axis("batch_norm", "mean_channels", c, mean.size());
  expect_axis("batch_norm", "variance_channels", c, variance.size());
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> a =
      scale.array().transpose() / (variance.array().transpose() + Scalar(epsilon)).sqrt();
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> b = offset.array().transpose() - mean.array().transpose() * a;
  Tensor<Scalar> out(input.shape());
  out.matrix().array() = (input.matrix().array().rowwise() * a).rowwise() + b;
  return out;
}

template <typename Scalar>
void update_running_stats(RunningStats<Scalar>& stats, const Tensor<Scalar>& mean, const Tensor<Scalar>& variance,
                          double decay) {
  if (!stats.initialized()) stats = RunningStats<Scalar>::fresh(mean.size());
  const Scalar d = Scalar(decay);
  stats.mean.array() = d * stats.mean.array() + (Scalar(1) - d) * mean.array();
  stats.variance.array() = d * stats.variance.array() + (Scalar(1) - d) * variance.array();
}

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& scale, const Tensor<Scalar>& offset,
                          RunningStats<Scalar>* stats, BnMode mode, const BatchNormConfig& config) {
  if (mode == BnMode::infer) {
    if (stats == nullptr || !stats->initialized())
      throw std::logic_error("batch_norm: infer mode requires initialized running statistics");
    return batch_normalize(input, stats->mean, stats->variance, scale, offset, config.epsilon);
  }
  auto [mean, var] = batch_moments(input);
  Tensor<Scalar> out = batch_normalize(input, mean, var, scale, offset, config.epsilon);
  if (stats != nullptr) update_running_stats(*stats, mean, var, config.decay);
  return out;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.array() = input.array().max(Scalar(0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.array() = input.array().unaryExpr([](Scalar t) { return sigmoid(t); });
  return out;
}

template <typename Scalar>
Tensor<Scalar> max_pool(const Tensor<Scalar>& input, Index window, Index stride) {
  ConvSpec spec{window, window, input.channels(), input.channels(), stride, Padding::same};
  const auto g = ConvGeometry::make(spec, input.height(), input.width());
  Tensor<Scalar> out(Shape{input.batch(), g.out_h, g.out_w, input.channels()},
                     -std::numeric_limits<Scalar>::infinity());
  for (Index n = 0; n < input.batch(); ++n)
    for (Index oh = 0; oh < g.out_h; ++oh)
      for (Index ow = 0; ow < g.out_w; ++ow) {
        auto dst = out.row(out.position(n, oh, ow));
        for (Index ky = 0; ky < window; ++ky) {
          const Index ih = oh * stride - g.pad_top + ky;
          if (ih < 0 || ih >= g.in_h) continue;
          for (Index kx = 0; kx < window; ++kx) {
            const Index iw = ow * stride - g.pad_left + kx;
            if (iw < 0 || iw >= g.in_w) continue;
            dst = dst.cwiseMax(input.row(input.position(n, ih, iw)));
          }
        }
      }
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  const Index hw = input.height() * input.width();
  if (hw == 0) throw DimensionError("global_avg_pool", "spatial", 1, 0);
  Tensor<Scalar> out(Shape{input.batch(), 1, 1, input.channels()});
  for (Index n = 0; n < input.batch(); ++n) {
    const auto block = input.matrix().middleRows(n * hw, hw);
    out.row(n) = block.colwise().sum() / Scalar(hw);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> dense_layer(const Tensor<Scalar>& features, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  const Index c = features.channels();
  expect_axis("dense_layer", "height", 1, features.height());
  expect_axis("dense_layer", "width", 1, features.width());
  expect_axis("dense_layer", "weight_in", c, weight.shape().width);
  const Index k = weight.channels();
  expect_axis("dense_layer", "bias", k, bias.size());
  Eigen::Map<const typename Tensor<Scalar>::RowMatrix> w(weight.data(), c, k);
  Tensor<Scalar> out(Shape{features.batch(), 1, 1, k});
  for (Index n = 0; n < features.batch(); ++n) out.row(n) = features.row(n) * w + bias.row(0);
  return out;
}

ActiveMask dilate_mask(const ActiveMask& mask) {
  const Index h = mask.rows(), w = mask.cols();
  ActiveMask out = ActiveMask::Constant(h, w, false);
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      if (!mask(i, j)) continue;
      for (Index di = std::max<Index>(i - 1, 0); di <= std::min<Index>(i + 1, h - 1); ++di)
        for (Index dj = std::max<Index>(j - 1, 0); dj <= std::min<Index>(j + 1, w - 1); ++dj) out(di, dj) = true;
    }
  return out;
}

#define SACT_INSTANTIATE_KERNELS(S)                                                                            \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const ConvSpec&);                              \
  template Tensor<S> conv2d_at(const Tensor<S>&, const Tensor<S>&, const ConvSpec&, const ActiveMask&);        \
  template Tensor<S>::RowMatrix im2col(const Tensor<S>&, const ConvSpec&, const ConvGeometry&);                \
  template std::pair<Tensor<S>, Tensor<S>> batch_moments(const Tensor<S>&);                                    \
  template Tensor<S> batch_normalize(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,   \
                                     const Tensor<S>&, double);                                                \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, RunningStats<S>*, BnMode, \
                                const BatchNormConfig&);                                                       \
  template void update_running_stats(RunningStats<S>&, const Tensor<S>&, const Tensor<S>&, double);           \
  template Tensor<S> relu(const Tensor<S>&);                                                                   \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                                \
  template Tensor<S> max_pool(const Tensor<S>&, Index, Index);                                                 \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                                        \
  template Tensor<S> dense_layer(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

SACT_INSTANTIATE_KERNELS(float)
SACT_INSTANTIATE_KERNELS(double)

}  // namespace sact
