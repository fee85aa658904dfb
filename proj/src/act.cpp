#include "sact/act.hpp"

#include <cmath>

namespace sact {

void check_block_arguments(const char* where, std::size_t units, std::size_t halting, double epsilon) {
  if (units == 0) throw std::invalid_argument(std::string(where) + ": a block needs at least one unit");
  if (halting + 1 != units)
    throw std::invalid_argument(std::string(where) + ": expected " + std::to_string(units - 1) +
                                " halting parameter sets, got " + std::to_string(halting));
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument(std::string(where) + ": epsilon must lie in (0, 1)");
}

template <typename Scalar>
Tensor<Scalar> pooled_halting_logits(const Tensor<Scalar>& x, const HaltingUnitParams<Scalar>& params) {
  expect_axis("halting_score", "channels", params.weight.shape().width, x.channels());
  return dense_layer(global_avg_pool(x), params.weight, params.bias);
}

template <typename Scalar>
std::vector<Scalar> act_halting_score(const Tensor<Scalar>& x, const HaltingUnitParams<Scalar>& params) {
  const Tensor<Scalar> z = pooled_halting_logits(x, params);
  std::vector<Scalar> h(static_cast<std::size_t>(x.batch()));
  for (Index n = 0; n < x.batch(); ++n) h[static_cast<std::size_t>(n)] = sigmoid(z[n]);
  return h;
}

template <typename Scalar>
ActBlockResult<Scalar> act_block_forward(const Tensor<Scalar>& input, std::span<const ResidualUnitParams<Scalar>> units,
                                         std::span<const HaltingUnitParams<Scalar>> halting, double epsilon,
                                         const BlockHooks<Scalar>* hooks) {
  check_block_arguments("act_block_forward", units.size(), halting.size(), epsilon);
  const Index L = static_cast<Index>(units.size());
  const Scalar threshold = Scalar(1) - Scalar(epsilon);
  const auto batch = static_cast<std::size_t>(input.batch());

  ActBlockResult<Scalar> res;
  res.units.assign(batch, 0);
  res.remainder.assign(batch, Scalar(0));
  res.distribution.assign(batch, std::vector<Scalar>(units.size(), Scalar(0)));
  res.ponder.assign(batch, Scalar(0));
  res.evaluations.resize(batch);

  for (std::size_t b = 0; b < batch; ++b) {
    Tensor<Scalar> x = input.example(static_cast<Index>(b));
    Tensor<Scalar> out;
    Scalar c = 0, R = 1, rho = 0;
    for (Index l = 1; l <= L; ++l) {
      const Index in_positions = x.height() * x.width();
      x = residual_unit_forward(x, units[static_cast<std::size_t>(l - 1)]);
      if (hooks && hooks->on_unit) hooks->on_unit(l);
      if (out.empty()) out = Tensor<Scalar>(x.shape());
      const Index positions = x.height() * x.width();
      res.evaluations[b].push_back(UnitEvaluation{in_positions, positions, l < L ? positions : 0});

      Scalar h = 1;
      if (l < L) {
        Field<Scalar> score(1, 1);
        score(0, 0) = act_halting_score(x, halting[static_cast<std::size_t>(l - 1)])[0];
        if (hooks && hooks->override_scores) hooks->override_scores(l, score);
        h = score(0, 0);
      }
      c += h;
      rho += 1;
      if (c < threshold) {
        out.array() += h * x.array();
        R -= h;
        res.distribution[b][static_cast<std::size_t>(l - 1)] = h;
      } else {
        out.array() += R * x.array();
        rho += R;
        res.distribution[b][static_cast<std::size_t>(l - 1)] = R;
        res.units[b] = l;
        break;
      }
    }
    res.remainder[b] = R;
    res.ponder[b] = rho;
    if (b == 0) res.output = Tensor<Scalar>(Shape{input.batch(), out.height(), out.width(), out.channels()});
    res.output.set_example(static_cast<Index>(b), out);
  }
  return res;
}

double ponder_regularized_loss(double task_loss, std::span<const double> block_ponders, double tau) {
  if (!(tau >= 0.0)) throw std::invalid_argument("ponder_regularized_loss: tau must be >= 0");
  double sum = 0;
  for (double rho : block_ponders) sum += rho;
  return task_loss + tau * sum;
}

#define SACT_INSTANTIATE_ACT(S)                                                                                  \
  template Tensor<S> pooled_halting_logits(const Tensor<S>&, const HaltingUnitParams<S>&);                      \
  template std::vector<S> act_halting_score(const Tensor<S>&, const HaltingUnitParams<S>&);                     \
  template ActBlockResult<S> act_block_forward(const Tensor<S>&, std::span<const ResidualUnitParams<S>>,        \
                                               std::span<const HaltingUnitParams<S>>, double, const BlockHooks<S>*);

SACT_INSTANTIATE_ACT(float)
SACT_INSTANTIATE_ACT(double)

}  // namespace sact
