#include "sact/network.hpp"

#include <algorithm>
#include <cmath>

namespace sact {

template <typename Scalar>
std::vector<HaltingUnitParams<Scalar>> BlockParams<Scalar>::act_halting() const {
  std::vector<HaltingUnitParams<Scalar>> out;
  out.reserve(halting.size());
  for (const auto& h : halting) out.push_back(h.pooled);
  return out;
}

template <typename Scalar>
NetworkParams<Scalar> NetworkParams<Scalar>::zeros(const NetworkSpec& spec) {
  spec.validate();
  NetworkParams p;
  p.spec = spec;
  p.stem.spec = spec.stem_conv();
  p.stem.kernel = Tensor<Scalar>(p.stem.spec.kernel_shape());
  for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
    const auto& b = spec.blocks[k];
    BlockParams<Scalar> block;
    for (Index l = 0; l < b.units; ++l) {
      const auto ul = static_cast<std::size_t>(l);
      block.units.push_back(ResidualUnitParams<Scalar>::zeros(spec.unit_input_channels(k, ul), b.bottleneck,
                                                              b.channels, l == 0 ? b.stride : 1));
      if (l + 1 < b.units && spec.halting != HaltingMode::none) {
        auto h = SactHaltingParams<Scalar>::zeros(b.channels);
        if (spec.halting != HaltingMode::sact) h.spatial = Tensor<Scalar>();
        block.halting.push_back(std::move(h));
      }
    }
    p.blocks.push_back(std::move(block));
  }
  const Index c = spec.blocks.back().channels;
  p.postnorm = BatchNormLayer<Scalar>::identity(c);
  p.fc_weight = Tensor<Scalar>(Shape{1, 1, c, spec.classes});
  p.fc_bias = Tensor<Scalar>(Shape{1, 1, 1, spec.classes});
  return p;
}

bool is_trainable(ParamKind kind) { return kind != ParamKind::running_stat; }

bool is_halting(const std::string& name) { return name.find("/halting/") != std::string::npos; }

namespace {

std::string unit_prefix(std::size_t k, std::size_t l) {
  return "block" + std::to_string(k + 1) + "/unit" + std::to_string(l + 1) + "/";
}

template <typename P, typename Visit>
void visit_bn(P& bn, const std::string& prefix, Visit& visit) {
  visit(prefix + "scale", bn.scale, ParamKind::norm);
  visit(prefix + "offset", bn.offset, ParamKind::norm);
  visit(prefix + "moving_mean", bn.stats.mean, ParamKind::running_stat);
  visit(prefix + "moving_variance", bn.stats.variance, ParamKind::running_stat);
}

template <typename Params, typename Visit>
void visit_all(Params& p, Visit& visit) {
  visit(std::string("stem/kernel"), p.stem.kernel, ParamKind::weight);
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    auto& block = p.blocks[k];
    for (std::size_t l = 0; l < block.units.size(); ++l) {
      auto& u = block.units[l];
      const std::string pre = unit_prefix(k, l);
      visit_bn(u.preact, pre + "bn1/", visit);
      visit(pre + "conv1/kernel", u.reduce.kernel, ParamKind::weight);
      visit_bn(u.mid, pre + "bn2/", visit);
      visit(pre + "conv2/kernel", u.spatial.kernel, ParamKind::weight);
      visit_bn(u.last, pre + "bn3/", visit);
      visit(pre + "conv3/kernel", u.restore.kernel, ParamKind::weight);
      if (u.projection) visit(pre + "shortcut/kernel", u.projection->kernel, ParamKind::weight);
      if (l < block.halting.size()) {
        auto& h = block.halting[l];
        visit(pre + "halting/weight", h.pooled.weight, ParamKind::weight);
        visit(pre + "halting/bias", h.pooled.bias, ParamKind::halting_bias);
        if (!h.spatial.empty()) visit(pre + "halting/spatial", h.spatial, ParamKind::weight);
      }
    }
  }
  visit_bn(p.postnorm, "postnorm/", visit);
  visit(std::string("logits/weight"), p.fc_weight, ParamKind::weight);
  visit(std::string("logits/bias"), p.fc_bias, ParamKind::bias);
}

}  // namespace

template <typename Scalar>
void for_each_parameter(NetworkParams<Scalar>& params, const ParamVisitor<Scalar>& visit) {
  visit_all(params, visit);
}

template <typename Scalar>
void for_each_parameter(const NetworkParams<Scalar>& params, const ConstParamVisitor<Scalar>& visit) {
  visit_all(params, visit);
}

// ---------------------------------------------------------------------------

template <typename Scalar>
NetworkOutput<Scalar> network_forward(const NetworkParams<Scalar>& params, const Tensor<Scalar>& images,
                                      const ForwardOptions<Scalar>& options) {
  const NetworkSpec& spec = params.spec;
  expect_axis("network_forward", "channels", spec.input_channels, images.channels());
  const auto batch = static_cast<std::size_t>(images.batch());
  const std::size_t K = params.blocks.size();

  NetworkOutput<Scalar> out;
  out.ponder.assign(K, std::vector<Scalar>(batch, Scalar(0)));
  out.units.assign(K, std::vector<double>(batch, 0.0));
  if (spec.halting == HaltingMode::sact) out.maps.assign(K, std::vector<PonderMap<Scalar>>(batch));
  out.records.assign(batch, EvaluationRecord{std::vector<std::vector<UnitEvaluation>>(K)});

  Tensor<Scalar> x = conv2d(images, params.stem.kernel, params.stem.spec);
  if (spec.stem_pool) x = max_pool(x);

  for (std::size_t k = 0; k < K; ++k) {
    const auto& block = params.blocks[k];
    const BlockHooks<Scalar>* hooks =
        options.hooks && k < options.hooks->size() ? &(*options.hooks)[k] : nullptr;
    const Index L = static_cast<Index>(block.units.size());
    switch (spec.halting) {
      case HaltingMode::none: {
        const Index in_pos = x.height() * x.width();
        for (Index l = 0; l < L; ++l) {
          const Index pos_in = l == 0 ? in_pos : x.height() * x.width();
          x = residual_unit_forward(x, block.units[static_cast<std::size_t>(l)]);
          if (hooks && hooks->on_unit) hooks->on_unit(l + 1);
          for (std::size_t b = 0; b < batch; ++b)
            out.records[b].blocks[k].push_back(UnitEvaluation{pos_in, x.height() * x.width(), 0});
        }
        for (std::size_t b = 0; b < batch; ++b) {
          out.units[k][b] = static_cast<double>(L);
          out.ponder[k][b] = Scalar(L + 1);
        }
        break;
      }
      case HaltingMode::act: {
        const auto halting = block.act_halting();
        auto r = act_block_forward<Scalar>(x, block.units, halting, spec.epsilon, hooks);
        for (std::size_t b = 0; b < batch; ++b) {
          out.units[k][b] = static_cast<double>(r.units[b]);
          out.ponder[k][b] = r.ponder[b];
          out.records[b].blocks[k] = std::move(r.evaluations[b]);
        }
        x = std::move(r.output);
        break;
      }
      case HaltingMode::sact: {
        auto r = sact_block_forward<Scalar>(x, block.units, block.halting, spec.epsilon, spec.tile, hooks);
        for (std::size_t b = 0; b < batch; ++b) {
          out.units[k][b] = r.states[b].units.template cast<double>().mean();
          out.ponder[k][b] = r.ponder[b];
          out.maps[k][b] = r.states[b].ponder;
          out.maps[k][b].block = static_cast<Index>(k);
          out.records[b].blocks[k] = std::move(r.evaluations[b]);
        }
        x = std::move(r.output);
        break;
      }
    }
  }
  x = bn_relu_infer(x, params.postnorm);
  out.logits = classifier_head(x, params.fc_weight, params.fc_bias);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename S>
class GraphBuilder {
 public:
  GraphBuilder(Tape<S>& tape, NetworkParams<S>& params, const GraphOptions& options)
      : t_(tape), p_(params), opt_(options) {}

  TrainingGraph<S> build(const Tensor<S>& images, const std::vector<Index>& labels) {
    const NetworkSpec& spec = p_.spec;
    expect_axis("build_training_graph", "channels", spec.input_channels, images.channels());
    batch_ = images.batch();
    const std::size_t K = p_.blocks.size();
    g_.units.assign(K, std::vector<double>(static_cast<std::size_t>(batch_), 0.0));
    g_.reached_last.assign(K, std::vector<bool>(static_cast<std::size_t>(batch_), false));
    g_.records.assign(static_cast<std::size_t>(batch_),
                      EvaluationRecord{std::vector<std::vector<UnitEvaluation>>(K)});

    Var x = ops::conv2d(t_, t_.constant(images), param("stem/kernel", p_.stem.kernel), p_.stem.spec);
    if (spec.stem_pool) x = ops::max_pool(t_, x);

    for (std::size_t k = 0; k < K; ++k) {
      switch (spec.halting) {
        case HaltingMode::none: x = plain_block(k, x); break;
        case HaltingMode::act: x = act_block(k, x); break;
        case HaltingMode::sact: x = sact_block(k, x); break;
      }
    }
    x = bn_relu("postnorm/", p_.postnorm, x);
    g_.logits = ops::dense(t_, ops::global_avg_pool(t_, x), param("logits/weight", p_.fc_weight),
                           param("logits/bias", p_.fc_bias));
    g_.task_loss = ops::softmax_cross_entropy(t_, g_.logits, labels);
    if (g_.block_ponder.empty()) {
      g_.penalty = t_.constant(Tensor<S>::scalar(S(0)));
    } else {
      g_.penalty = ops::mean(t_, g_.block_ponder[0]);
      for (std::size_t k = 1; k < g_.block_ponder.size(); ++k)
        g_.penalty = ops::add(t_, g_.penalty, ops::mean(t_, g_.block_ponder[k]));
    }
    g_.objective = ops::add(t_, g_.task_loss, ops::scale(t_, g_.penalty, S(opt_.tau)));
    return std::move(g_);
  }

 private:
  Var param(const std::string& name, Tensor<S>& tensor) { return t_.parameter(name, tensor); }

  Var bn_relu(const std::string& prefix, BatchNormLayer<S>& bn, Var x) {
    RunningStats<S>* stats = opt_.bn == BnMode::infer || opt_.update_running_stats ? &bn.stats : nullptr;
    const Var z = ops::batch_norm(t_, x, param(prefix + "scale", bn.scale), param(prefix + "offset", bn.offset), stats,
                                  opt_.bn, opt_.norm);
    if (opt_.record_kinks)
      for (const S v : t_.value(z).values()) g_.kinks.push_back(v > S(0));
    return ops::relu(t_, z);
  }

  // Returns (pre-activation, residual branch).
  std::pair<Var, Var> residual_branch(std::size_t k, std::size_t l, Var x) {
    auto& u = p_.blocks[k].units[l];
    const std::string pre = unit_prefix(k, l);
    const Var a = bn_relu(pre + "bn1/", u.preact, x);
    Var r = ops::conv2d(t_, a, param(pre + "conv1/kernel", u.reduce.kernel), u.reduce.spec);
    r = ops::conv2d(t_, bn_relu(pre + "bn2/", u.mid, r), param(pre + "conv2/kernel", u.spatial.kernel), u.spatial.spec);
    r = ops::conv2d(t_, bn_relu(pre + "bn3/", u.last, r), param(pre + "conv3/kernel", u.restore.kernel),
                    u.restore.spec);
    return {a, r};
  }

  Var unit(std::size_t k, std::size_t l, Var x) {
    auto& u = p_.blocks[k].units[l];
    auto [a, r] = residual_branch(k, l, x);
    if (u.projection)
      return ops::add(t_, ops::conv2d(t_, a, param(unit_prefix(k, l) + "shortcut/kernel", u.projection->kernel),
                                      u.projection->spec),
                      r);
    return ops::add(t_, x, r);
  }

  void record_dense(std::size_t k, Index in_pos, Index out_pos, bool halting) {
    for (auto& rec : g_.records) rec.blocks[k].push_back(UnitEvaluation{in_pos, out_pos, halting ? out_pos : 0});
  }

  Var plain_block(std::size_t k, Var x) {
    const std::size_t L = p_.blocks[k].units.size();
    for (std::size_t l = 0; l < L; ++l) {
      const Index in_pos = t_.value(x).height() * t_.value(x).width();
      x = unit(k, l, x);
      record_dense(k, in_pos, t_.value(x).height() * t_.value(x).width(), false);
    }
    for (Index b = 0; b < batch_; ++b) {
      g_.units[k][static_cast<std::size_t>(b)] = static_cast<double>(L);
      g_.reached_last[k][static_cast<std::size_t>(b)] = true;
    }
    return x;
  }

  Var halting_score(std::size_t k, std::size_t l, Var x, bool spatial) {
    auto& h = p_.blocks[k].halting[l];
    const std::string pre = unit_prefix(k, l) + "halting/";
    const Var pooled = ops::dense(t_, ops::global_avg_pool(t_, x), param(pre + "weight", h.pooled.weight),
                                  param(pre + "bias", h.pooled.bias));
    if (!spatial) return ops::sigmoid(t_, pooled);
    const Index C = t_.value(x).channels();
    const Var z = ops::conv2d(t_, x, param(pre + "spatial", h.spatial), SactHaltingParams<S>::conv_spec(C));
    Var score = ops::sigmoid(t_, ops::add(t_, z, pooled));
    if (p_.spec.tile > 1) score = ops::tile_scores(t_, score, p_.spec.tile);
    return score;
  }

  Tensor<S> mask_tensor(const Shape& shape, const std::vector<bool>& flags) {
    Tensor<S> m(shape);
    for (Index i = 0; i < m.size(); ++i) m[i] = flags[static_cast<std::size_t>(i)] ? S(1) : S(0);
    return m;
  }

  // Shared halting accumulation over a (B,H,W,1) field of positions.
  struct HaltState {
    Shape shape;
    std::vector<bool> active;
    std::vector<S> cumulative;
    std::vector<Index> units;
    Var out, remainder, ponder;
  };

  HaltState start(const Shape& x_shape, const Shape& field) {
    HaltState s;
    s.shape = field;
    s.active.assign(static_cast<std::size_t>(field.size()), true);
    s.cumulative.assign(static_cast<std::size_t>(field.size()), S(0));
    s.units.assign(static_cast<std::size_t>(field.size()), 0);
    s.out = t_.constant(Tensor<S>(x_shape));
    s.remainder = t_.constant(Tensor<S>(field, S(1)));
    s.ponder = t_.constant(Tensor<S>(field));
    return s;
  }

  void accumulate(HaltState& s, Index l, Index L, Var x, Var h) {
    const S threshold = S(1) - S(p_.spec.epsilon);
    const Tensor<S>& hv = t_.value(h);
    std::vector<bool> cont(s.active.size(), false), halt(s.active.size(), false);
    const std::vector<bool> was_active = s.active;
    for (std::size_t i = 0; i < s.active.size(); ++i) {
      if (!s.active[i]) continue;
      const S hi = l < L ? hv[static_cast<Index>(i)] : S(1);
      s.cumulative[i] += hi;
      s.units[i] = l;
      if (l < L) g_.halting_margin = std::min(g_.halting_margin, std::abs(double(s.cumulative[i] - threshold)));
      if (s.cumulative[i] < threshold) {
        cont[i] = true;
      } else {
        halt[i] = true;
        s.active[i] = false;
      }
      g_.pattern.push_back(cont[i]);
    }
    const Var m_cont = t_.constant(mask_tensor(s.shape, cont));
    const Var m_halt = t_.constant(mask_tensor(s.shape, halt));
    const Var weight = ops::add(t_, ops::mul(t_, h, m_cont), ops::mul(t_, s.remainder, m_halt));
    s.out = ops::add(t_, s.out, ops::mul(t_, x, weight));
    const Var ponder = ops::add(t_, s.ponder, t_.constant(mask_tensor(s.shape, was_active)));
    s.ponder = ops::add(t_, ponder, ops::mul(t_, s.remainder, m_halt));
    s.remainder = ops::sub(t_, s.remainder, ops::mul(t_, h, m_cont));
  }

  Var ones(const Shape& shape) { return t_.constant(Tensor<S>(shape, S(1))); }

  Var act_block(std::size_t k, Var x) {
    const Index L = static_cast<Index>(p_.blocks[k].units.size());
    HaltState s;
    for (Index l = 1; l <= L; ++l) {
      if (l > 1 && std::none_of(s.active.begin(), s.active.end(), [](bool a) { return a; })) break;
      const Index in_pos = t_.value(x).height() * t_.value(x).width();
      x = unit(k, static_cast<std::size_t>(l - 1), x);
      const Shape xs = t_.value(x).shape();
      if (l == 1) s = start(xs, Shape{batch_, 1, 1, 1});
      for (Index b = 0; b < batch_; ++b)
        if (s.active[static_cast<std::size_t>(b)])
          g_.records[static_cast<std::size_t>(b)].blocks[k].push_back(
              UnitEvaluation{in_pos, xs.height * xs.width, l < L ? xs.height * xs.width : 0});
      const Var h = l < L ? halting_score(k, static_cast<std::size_t>(l - 1), x, false) : ones(s.shape);
      accumulate(s, l, L, x, h);
    }
    finish(k, s);
    return s.out;
  }

  Var sact_block(std::size_t k, Var x_hat) {
    const Index L = static_cast<Index>(p_.blocks[k].units.size());
    HaltState s;
    Var x;
    for (Index l = 1; l <= L; ++l) {
      const auto ul = static_cast<std::size_t>(l - 1);
      if (l == 1) {
        const Index in_pos = t_.value(x_hat).height() * t_.value(x_hat).width();
        x = unit(k, 0, x_hat);
        const Shape xs = t_.value(x).shape();
        s = start(xs, Shape{batch_, xs.height, xs.width, 1});
        for (auto& rec : g_.records)
          rec.blocks[k].push_back(UnitEvaluation{in_pos, xs.height * xs.width, 0});
      } else {
        if (std::none_of(s.active.begin(), s.active.end(), [](bool a) { return a; })) break;
        if (p_.blocks[k].units[ul].projection || p_.blocks[k].units[ul].stride() != 1)
          throw UnsupportedConfiguration("sact_block_forward: units after the first must be stride-1 without projection");
        record_perforated(k, s);
        const Var m = t_.constant(mask_tensor(s.shape, s.active));
        const Var r = residual_branch(k, ul, x_hat).second;
        x = ops::add(t_, x_hat, ops::mul(t_, r, m));
      }
      if (l < L)
        for (Index b = 0; b < batch_; ++b)
          if (const Index n = count_in(s, b); n > 0)
            g_.records[static_cast<std::size_t>(b)].blocks[k].back().halting_positions = n;
      const Var h = l < L ? halting_score(k, ul, x, true) : ones(s.shape);
      accumulate(s, l, L, x, h);
      x_hat = x;
    }
    finish(k, s);
    return s.out;
  }

  Index count_in(const HaltState& s, Index b) const {
    const Index hw = s.shape.height * s.shape.width;
    Index n = 0;
    for (Index i = 0; i < hw; ++i) n += s.active[static_cast<std::size_t>(b * hw + i)] ? 1 : 0;
    return n;
  }

  void record_perforated(std::size_t k, const HaltState& s) {
    const Index H = s.shape.height, W = s.shape.width;
    for (Index b = 0; b < batch_; ++b) {
      ActiveMask mask(H, W);
      for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j) mask(i, j) = s.active[static_cast<std::size_t>((b * H + i) * W + j)];
      if (!mask.any()) continue;
      g_.records[static_cast<std::size_t>(b)].blocks[k].push_back(
          UnitEvaluation{dilate_mask(mask).count(), mask.count(), 0});
    }
  }

  void finish(std::size_t k, HaltState& s) {
    const Index L = static_cast<Index>(p_.blocks[k].units.size());
    const Index hw = s.shape.height * s.shape.width;
    for (Index b = 0; b < batch_; ++b) {
      double sum = 0;
      bool last = false;
      for (Index i = 0; i < hw; ++i) {
        const auto idx = static_cast<std::size_t>(b * hw + i);
        sum += static_cast<double>(s.units[idx]);
        last = last || s.units[idx] == L;
      }
      g_.units[k][static_cast<std::size_t>(b)] = sum / static_cast<double>(hw);
      g_.reached_last[k][static_cast<std::size_t>(b)] = last;
    }
    g_.block_ponder.push_back(p_.spec.halting == HaltingMode::sact ? ops::spatial_mean(t_, s.ponder) : s.ponder);
  }

  Tape<S>& t_;
  NetworkParams<S>& p_;
  GraphOptions opt_;
  Index batch_ = 0;
  TrainingGraph<S> g_;
};

}  // namespace

template <typename Scalar>
TrainingGraph<Scalar> build_training_graph(Tape<Scalar>& tape, NetworkParams<Scalar>& params,
                                           const Tensor<Scalar>& images, const std::vector<Index>& labels,
                                           const GraphOptions& options) {
  if (!(options.tau >= 0.0)) throw std::invalid_argument("build_training_graph: tau must be >= 0");
  return GraphBuilder<Scalar>(tape, params, options).build(images, labels);
}

#define SACT_INSTANTIATE_NETWORK(S)                                                                          \
  template struct BlockParams<S>;                                                                            \
  template struct NetworkParams<S>;                                                                          \
  template void for_each_parameter(NetworkParams<S>&, const ParamVisitor<S>&);                               \
  template void for_each_parameter(const NetworkParams<S>&, const ConstParamVisitor<S>&);                    \
  template NetworkOutput<S> network_forward(const NetworkParams<S>&, const Tensor<S>&, const ForwardOptions<S>&); \
  template TrainingGraph<S> build_training_graph(Tape<S>&, NetworkParams<S>&, const Tensor<S>&,              \
                                                 const std::vector<Index>&, const GraphOptions&);

SACT_INSTANTIATE_NETWORK(float)
SACT_INSTANTIATE_NETWORK(double)

}  // namespace sact
