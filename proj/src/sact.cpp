#include "sact/sact.hpp"

namespace sact {

template <typename Scalar>
Scalar PonderMap<Scalar>::mean() const {
  if (values.size() == 0) return Scalar(0);
  const Scalar first = values(0, 0);
  return first + (values - first).sum() / Scalar(values.size());
}

template <typename Scalar>
Field<Scalar> field_of(const Tensor<Scalar>& t, Index example, Index channel) {
  Field<Scalar> f(t.height(), t.width());
  for (Index i = 0; i < t.height(); ++i)
    for (Index j = 0; j < t.width(); ++j) f(i, j) = t(example, i, j, channel);
  return f;
}

template <typename Scalar>
Tensor<Scalar> sact_halting_scores(const Tensor<Scalar>& x, const SactHaltingParams<Scalar>& params,
                                   const ActiveMask* where) {
  const ConvSpec spec = SactHaltingParams<Scalar>::conv_spec(x.channels());
  const Tensor<Scalar> pooled = pooled_halting_logits(x, params.pooled);
  Tensor<Scalar> z = where ? conv2d_at(x, params.spatial, spec, *where) : conv2d(x, params.spatial, spec);
  for (Index n = 0; n < x.batch(); ++n)
    for (Index i = 0; i < x.height(); ++i)
      for (Index j = 0; j < x.width(); ++j) {
        if (where && !(*where)(i, j)) continue;
        Scalar& v = z(n, i, j, 0);
        v = sigmoid(v + pooled[n]);
      }
  return z;
}

template <typename Scalar>
Field<Scalar> tile_halting_scores(const Field<Scalar>& scores, Index k) {
  if (k <= 0) throw std::invalid_argument("tile_halting_scores: tile size must be >= 1");
  if (k == 1) return scores;
  const Index H = scores.rows(), W = scores.cols();
  Field<Scalar> out(H, W);
  for (Index ti = 0; ti < H; ti += k)
    for (Index tj = 0; tj < W; tj += k) {
      const Index h = std::min(k, H - ti), w = std::min(k, W - tj);
      const Scalar avg = scores.block(ti, tj, h, w).sum() / Scalar(h * w);
      out.block(ti, tj, h, w).setConstant(avg);
    }
  return out;
}

template <typename Scalar>
SactBlockResult<Scalar> sact_block_forward(const Tensor<Scalar>& input,
                                           std::span<const ResidualUnitParams<Scalar>> units,
                                           std::span<const SactHaltingParams<Scalar>> halting, double epsilon,
                                           Index tile, const BlockHooks<Scalar>* hooks) {
  check_block_arguments("sact_block_forward", units.size(), halting.size(), epsilon);
  if (tile <= 0) throw std::invalid_argument("sact_block_forward: tile size must be >= 1");
  for (std::size_t l = 1; l < units.size(); ++l)
    if (units[l].stride() != 1 || units[l].projection)
      throw UnsupportedConfiguration("sact_block_forward: units after the first must be stride-1 without projection");
  const Index L = static_cast<Index>(units.size());
  const Scalar threshold = Scalar(1) - Scalar(epsilon);
  const auto batch = static_cast<std::size_t>(input.batch());

  SactBlockResult<Scalar> res;
  res.ponder.assign(batch, Scalar(0));
  res.states.resize(batch);
  res.evaluations.resize(batch);

  for (std::size_t b = 0; b < batch; ++b) {
    auto& st = res.states[b];
    Tensor<Scalar> x_hat = input.example(static_cast<Index>(b));
    for (Index l = 1; l <= L; ++l) {
      const auto& unit = units[static_cast<std::size_t>(l - 1)];
      Tensor<Scalar> x;
      UnitEvaluation ev;
      if (l == 1) {
        ev.first_layer_positions = x_hat.height() * x_hat.width();
        x = residual_unit_forward(x_hat, unit);
        const Index H = x.height(), W = x.width();
        st.active = ActiveMask::Constant(H, W, true);
        st.cumulative = Field<Scalar>::Zero(H, W);
        st.remainder = Field<Scalar>::Ones(H, W);
        st.ponder.values = Field<Scalar>::Zero(H, W);
        st.units = CountField::Zero(H, W);
        st.output = Tensor<Scalar>(x.shape());
        ev.active_positions = H * W;
      } else {
        if (!st.active.any()) break;
        PerforationCounts counts;
        x = perforated_residual_apply(x_hat, unit, st.active, &counts);
        ev.first_layer_positions = counts.first_layer_positions;
        ev.active_positions = counts.active_positions;
      }
      if (hooks && hooks->on_unit) hooks->on_unit(l);

      Field<Scalar> h;
      if (l < L) {
        ev.halting_positions = st.active.count();
        h = field_of(sact_halting_scores(x, halting[static_cast<std::size_t>(l - 1)], &st.active), 0);
        h = tile_halting_scores(h, tile);
        if (hooks && hooks->override_scores) hooks->override_scores(l, h);
      }
      res.evaluations[b].push_back(ev);

      for (Index i = 0; i < x.height(); ++i)
        for (Index j = 0; j < x.width(); ++j) {
          if (!st.active(i, j)) continue;
          const Scalar hij = l < L ? h(i, j) : Scalar(1);
          const Index p = x.position(0, i, j);
          st.cumulative(i, j) += hij;
          st.ponder.values(i, j) += 1;
          st.units(i, j) = l;
          if (st.cumulative(i, j) < threshold) {
            st.output.row(p).array() += hij * x.row(p).array();
            st.remainder(i, j) -= hij;
          } else {
            st.output.row(p).array() += st.remainder(i, j) * x.row(p).array();
            st.ponder.values(i, j) += st.remainder(i, j);
            st.active(i, j) = false;
          }
        }
      x_hat = std::move(x);
    }
    res.ponder[b] = st.ponder.mean();
    if (b == 0) {
      const Shape s = st.output.shape();
      res.output = Tensor<Scalar>(Shape{input.batch(), s.height, s.width, s.channels});
    }
    res.output.set_example(static_cast<Index>(b), st.output);
  }
  return res;
}

#define SACT_INSTANTIATE_SACT(S)                                                                                  \
  template struct PonderMap<S>;                                                                                   \
  template Field<S> field_of(const Tensor<S>&, Index, Index);                                                     \
  template Tensor<S> sact_halting_scores(const Tensor<S>&, const SactHaltingParams<S>&, const ActiveMask*);      \
  template Field<S> tile_halting_scores(const Field<S>&, Index);                                                  \
  template SactBlockResult<S> sact_block_forward(const Tensor<S>&, std::span<const ResidualUnitParams<S>>,        \
                                                 std::span<const SactHaltingParams<S>>, double, Index,            \
                                                 const BlockHooks<S>*);

SACT_INSTANTIATE_SACT(float)
SACT_INSTANTIATE_SACT(double)

}  // namespace sact
