#pragma once

#include "sact/kernels.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace sact {

/// Handle to a tape node.
struct Var {
  Index id = -1;
  bool valid() const { return id >= 0; }
};

/// Linear record of primitive applications. Backward walks the record in reverse.
template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, Var self)>;

  Var constant(Tensor<Scalar> value);
  /// Registers a named parameter. Registering the same name again returns the existing node.
  Var parameter(const std::string& name, const Tensor<Scalar>& value);
  Var record(Tensor<Scalar> value, std::initializer_list<Var> inputs, Backward backward);

  const Tensor<Scalar>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }
  bool has_grad(Var v) const { return !nodes_.at(static_cast<std::size_t>(v.id)).grad.empty(); }
  /// Gradient buffer of `v`, allocated as zeros on first access.
  Tensor<Scalar>& grad(Var v);
  /// Gradient of `v`, or zeros of its shape when nothing reached it.
  Tensor<Scalar> grad_or_zero(Var v) const;

  /// Seeds d loss / d loss = 1 and runs every recorded backward step in reverse order.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::pair<std::string, Var>>& parameters() const { return params_; }
  std::optional<Var> find_parameter(const std::string& name) const;
  /// Accumulated gradient for a named parameter; zeros when it did not influence the loss.
  Tensor<Scalar> gradient(const std::string& name) const;

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Var>> params_;
};

extern template class Tape<float>;
extern template class Tape<double>;

namespace ops {

template <typename S>
Var conv2d(Tape<S>& t, Var x, Var kernel, const ConvSpec& spec);

/// Train mode uses batch statistics (and folds them into `stats` when non-null); infer mode
/// reads `stats`.
template <typename S>
Var batch_norm(Tape<S>& t, Var x, Var scale, Var offset, RunningStats<S>* stats, BnMode mode,
               const BatchNormConfig& config = {});

template <typename S>
Var relu(Tape<S>& t, Var x);
template <typename S>
Var sigmoid(Tape<S>& t, Var x);

/// Elementwise a + b, a - b, a * b. `b` broadcasts along every axis where its extent is 1.
template <typename S>
Var add(Tape<S>& t, Var a, Var b);
template <typename S>
Var sub(Tape<S>& t, Var a, Var b);
template <typename S>
Var mul(Tape<S>& t, Var a, Var b);
template <typename S>
Var scale(Tape<S>& t, Var a, S factor);

template <typename S>
Var max_pool(Tape<S>& t, Var x, Index window = 3, Index stride = 2);
template <typename S>
Var global_avg_pool(Tape<S>& t, Var x);
template <typename S>
Var dense(Tape<S>& t, Var features, Var weight, Var bias);

/// Per-example tile averaging of a (B,H,W,1) score field.
template <typename S>
Var tile_scores(Tape<S>& t, Var scores, Index k);
/// (B,H,W,1) -> (B,1,1,1) spatial mean, same arithmetic as PonderMap::mean.
template <typename S>
Var spatial_mean(Tape<S>& t, Var field);
/// Mean of every element -> scalar.
template <typename S>
Var mean(Tape<S>& t, Var x);
/// Mean softmax cross-entropy of (B,1,1,K) logits -> scalar.
template <typename S>
Var softmax_cross_entropy(Tape<S>& t, Var logits, const std::vector<Index>& labels);

}  // namespace ops

// ---------------------------------------------------------------------------
// Finite-difference checking

struct ParamDeviation {
  std::string name;
  double max_abs = 0;
  double max_rel = 0;
  Index checked = 0;
  Index failed = 0;
  bool passed = true;
};

struct GradReport {
  std::vector<ParamDeviation> params;
  bool skipped = false;
  std::string skip_reason;
  Index discontinuous = 0;  // coordinates dropped because the halting pattern changed under perturbation

  bool passed() const;
  std::string format() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double rtol = 1e-3;
  double atol = 1e-7;
  Index min_coordinates = 50;
  std::uint64_t seed = 0;
};

/// One evaluation of a differentiable model: the loss node plus screening information.
struct GradProbe {
  Var loss;
  /// Smallest |c - (1 - eps)| seen across all halting accumulations.
  double halting_margin = std::numeric_limits<double>::infinity();
  /// Discrete halting decisions taken; must not change between the +/- evaluations.
  std::vector<bool> pattern;
};

/// A named, mutable parameter tensor.
struct ParamRef {
  std::string name;
  Tensor<double>* tensor;
};

/// Central differences on every parameter tensor (all coordinates, or `min_coordinates` sampled
/// ones when the tensor is larger). `build` must register parameters under the same names.
GradReport finite_diff_check(const std::vector<ParamRef>& params,
                             const std::function<GradProbe(Tape<double>&)>& build, const GradCheckOptions& options = {});

}  // namespace sact
