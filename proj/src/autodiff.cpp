#include "sact/autodiff.hpp"
#include "sact/sact.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace sact {

template <typename Scalar>
Var Tape<Scalar>::constant(Tensor<Scalar> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var{static_cast<Index>(nodes_.size()) - 1};
}

template <typename Scalar>
Var Tape<Scalar>::parameter(const std::string& name, const Tensor<Scalar>& value) {
  if (auto existing = find_parameter(name)) return *existing;
  nodes_.push_back(Node{value, {}, true, {}});
  const Var v{static_cast<Index>(nodes_.size()) - 1};
  params_.emplace_back(name, v);
  return v;
}

template <typename Scalar>
Var Tape<Scalar>::record(Tensor<Scalar> value, std::initializer_list<Var> inputs, Backward backward) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [&](Var v) { return requires_grad(v); });
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
  return Var{static_cast<Index>(nodes_.size()) - 1};
}

template <typename Scalar>
Tensor<Scalar>& Tape<Scalar>::grad(Var v) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<Scalar>(n.value.shape());
  return n.grad;
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::grad_or_zero(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.grad.empty() ? Tensor<Scalar>(n.value.shape()) : n.grad;
}

template <typename Scalar>
void Tape<Scalar>::backward(Var loss) {
  if (value(loss).size() != 1)
    throw std::invalid_argument("Tape::backward: loss must be a scalar, got shape " + value(loss).shape().str());
  for (auto& n : nodes_) n.grad = Tensor<Scalar>();
  grad(loss)[0] = Scalar(1);
  for (Index i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this, Var{i});
  }
}

template <typename Scalar>
std::optional<Var> Tape<Scalar>::find_parameter(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  return std::nullopt;
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::gradient(const std::string& name) const {
  const auto v = find_parameter(name);
  if (!v) throw std::out_of_range("Tape::gradient: unknown parameter '" + name + "'");
  return grad_or_zero(*v);
}

template class Tape<float>;
template class Tape<double>;

namespace ops {

namespace {

template <typename S>
void check_broadcast(const char* where, const Shape& a, const Shape& b) {
  auto axis = [&](const char* name, Index ea, Index eb) {
    if (eb != ea && eb != 1) throw DimensionError(where, name, ea, eb);
  };
  axis("batch", a.batch, b.batch);
  axis("height", a.height, b.height);
  axis("width", a.width, b.width);
  axis("channels", a.channels, b.channels);
}

// Calls f(index_in_a, index_in_b) over every element of a.
template <typename F>
void for_each_broadcast(const Shape& a, const Shape& b, F&& f) {
  Index ia = 0;
  for (Index n = 0; n < a.batch; ++n)
    for (Index h = 0; h < a.height; ++h)
      for (Index w = 0; w < a.width; ++w) {
        const Index base = ((( b.batch == 1 ? 0 : n) * b.height + (b.height == 1 ? 0 : h)) * b.width +
                            (b.width == 1 ? 0 : w)) * b.channels;
        for (Index c = 0; c < a.channels; ++c, ++ia) f(ia, base + (b.channels == 1 ? 0 : c));
      }
}

}  // namespace

template <typename S>
Var conv2d(Tape<S>& t, Var x, Var kernel, const ConvSpec& spec) {
  Tensor<S> y = sact::conv2d(t.value(x), t.value(kernel), spec);
  return t.record(std::move(y), {x, kernel}, [x, kernel, spec](Tape<S>& t, Var self) {
    const Tensor<S>& in = t.value(x);
    const Tensor<S>& dy = t.grad(self);
    const auto g = ConvGeometry::make(spec, in.height(), in.width());
    const auto cols = im2col(in, spec, g);
    Eigen::Map<const typename Tensor<S>::RowMatrix> dym(dy.data(), cols.rows(), spec.out_channels);
    if (t.requires_grad(kernel)) {
      Tensor<S>& dk = t.grad(kernel);
      Eigen::Map<typename Tensor<S>::RowMatrix> dkm(dk.data(), spec.fan_in(), spec.out_channels);
      dkm.noalias() += cols.transpose() * dym;
    }
    if (t.requires_grad(x)) {
      Eigen::Map<const typename Tensor<S>::RowMatrix> w(t.value(kernel).data(), spec.fan_in(), spec.out_channels);
      const typename Tensor<S>::RowMatrix dcols = dym * w.transpose();
      Tensor<S>& dx = t.grad(x);
      const Index cin = spec.in_channels;
      Index r = 0;
      for (Index n = 0; n < in.batch(); ++n)
        for (Index oh = 0; oh < g.out_h; ++oh)
          for (Index ow = 0; ow < g.out_w; ++ow, ++r) {
            const S* src = dcols.data() + r * dcols.cols();
            for (Index ky = 0; ky < spec.kernel_h; ++ky) {
              const Index ih = oh * spec.stride - g.pad_top + ky;
              for (Index kx = 0; kx < spec.kernel_w; ++kx, src += cin) {
                const Index iw = ow * spec.stride - g.pad_left + kx;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                S* dst = dx.data() + dx.offset(n, ih, iw, 0);
                for (Index c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
    }
  });
}

template <typename S>
Var batch_norm(Tape<S>& t, Var x, Var scale, Var offset, RunningStats<S>* stats, BnMode mode,
               const BatchNormConfig& config) {
  const Tensor<S>& in = t.value(x);
  Tensor<S> mean, var;
  if (mode == BnMode::infer) {
    if (stats == nullptr || !stats->initialized())
      throw std::logic_error("batch_norm: infer mode requires initialized running statistics");
    mean = stats->mean;
    var = stats->variance;
  } else {
    std::tie(mean, var) = batch_moments(in);
    if (stats != nullptr) update_running_stats(*stats, mean, var, config.decay);
  }
  Tensor<S> y = batch_normalize(in, mean, var, t.value(scale), t.value(offset), config.epsilon);
  const double eps = config.epsilon;
  return t.record(std::move(y), {x, scale, offset}, [=](Tape<S>& t, Var self) {
    const Tensor<S>& in = t.value(x);
    const Tensor<S>& dy = t.grad(self);
    const Index M = in.shape().positions();
    using RowArray = Eigen::Array<S, 1, Eigen::Dynamic>;
    const RowArray inv = (var.array().transpose() + S(eps)).rsqrt();
    const RowArray mu = mean.array().transpose();
    const auto xhat = ((in.matrix().array().rowwise() - mu).rowwise() * inv).eval();
    const auto dym = dy.matrix().array();
    const RowArray sum_dy = dym.colwise().sum();
    const RowArray sum_dy_xhat = (dym * xhat).colwise().sum();
    if (t.requires_grad(scale)) t.grad(scale).array() += sum_dy_xhat.transpose();
    if (t.requires_grad(offset)) t.grad(offset).array() += sum_dy.transpose();
    if (t.requires_grad(x)) {
      const RowArray a = t.value(scale).array().transpose() * inv;
      auto dx = t.grad(x).matrix().array();
      if (mode == BnMode::infer) {
        dx += dym.rowwise() * a;
      } else {
        const RowArray mean_dy = sum_dy / S(M);
        const RowArray mean_dy_xhat = sum_dy_xhat / S(M);
        dx += ((dym.rowwise() - mean_dy) - xhat.rowwise() * mean_dy_xhat).rowwise() * a;
      }
    }
  });
}

template <typename S>
Var relu(Tape<S>& t, Var x) {
  return t.record(sact::relu(t.value(x)), {x}, [x](Tape<S>& t, Var self) {
    t.grad(x).array() += (t.value(x).array() > S(0)).select(t.grad(self).array(), S(0));
  });
}

template <typename S>
Var sigmoid(Tape<S>& t, Var x) {
  return t.record(sact::sigmoid(t.value(x)), {x}, [x](Tape<S>& t, Var self) {
    const auto& y = t.value(self).array();
    t.grad(x).array() += t.grad(self).array() * y * (S(1) - y);
  });
}

namespace {

enum class Binary { add, sub, mul };

template <typename S>
Var binary(Tape<S>& t, Var a, Var b, Binary kind, const char* where) {
  const Tensor<S>& av = t.value(a);
  const Tensor<S>& bv = t.value(b);
  check_broadcast<S>(where, av.shape(), bv.shape());
  Tensor<S> y(av.shape());
  if (av.shape() == bv.shape()) {
    switch (kind) {
      case Binary::add: y.array() = av.array() + bv.array(); break;
      case Binary::sub: y.array() = av.array() - bv.array(); break;
      case Binary::mul: y.array() = av.array() * bv.array(); break;
    }
  } else {
    for_each_broadcast(av.shape(), bv.shape(), [&](Index i, Index j) {
      switch (kind) {
        case Binary::add: y[i] = av[i] + bv[j]; break;
        case Binary::sub: y[i] = av[i] - bv[j]; break;
        case Binary::mul: y[i] = av[i] * bv[j]; break;
      }
    });
  }
  return t.record(std::move(y), {a, b}, [a, b, kind](Tape<S>& t, Var self) {
    const Tensor<S>& g = t.grad(self);
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    Tensor<S>* da = ga ? &t.grad(a) : nullptr;
    Tensor<S>* db = gb ? &t.grad(b) : nullptr;
    for_each_broadcast(av.shape(), bv.shape(), [&](Index i, Index j) {
      switch (kind) {
        case Binary::add:
          if (da) (*da)[i] += g[i];
          if (db) (*db)[j] += g[i];
          break;
        case Binary::sub:
          if (da) (*da)[i] += g[i];
          if (db) (*db)[j] -= g[i];
          break;
        case Binary::mul:
          if (da) (*da)[i] += g[i] * bv[j];
          if (db) (*db)[j] += g[i] * av[i];
          break;
      }
    });
  });
}

}  // namespace

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  return binary(t, a, b, Binary::add, "ops::add");
}
template <typename S>
Var sub(Tape<S>& t, Var a, Var b) {
  return binary(t, a, b, Binary::sub, "ops::sub");
}
template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  return binary(t, a, b, Binary::mul, "ops::mul");
}

template <typename S>
Var scale(Tape<S>& t, Var a, S factor) {
  Tensor<S> y(t.value(a).shape());
  y.array() = t.value(a).array() * factor;
  return t.record(std::move(y), {a}, [a, factor](Tape<S>& t, Var self) {
    t.grad(a).array() += t.grad(self).array() * factor;
  });
}

template <typename S>
Var max_pool(Tape<S>& t, Var x, Index window, Index stride) {
  return t.record(sact::max_pool(t.value(x), window, stride), {x}, [x, window, stride](Tape<S>& t, Var self) {
    const Tensor<S>& in = t.value(x);
    const Tensor<S>& out = t.value(self);
    const Tensor<S>& g = t.grad(self);
    Tensor<S>& dx = t.grad(x);
    ConvSpec spec{window, window, in.channels(), in.channels(), stride, Padding::same};
    const auto geo = ConvGeometry::make(spec, in.height(), in.width());
    for (Index n = 0; n < in.batch(); ++n)
      for (Index oh = 0; oh < geo.out_h; ++oh)
        for (Index ow = 0; ow < geo.out_w; ++ow)
          for (Index c = 0; c < in.channels(); ++c) {
            const S target = out(n, oh, ow, c);
            bool done = false;
            for (Index ky = 0; ky < window && !done; ++ky) {
              const Index ih = oh * stride - geo.pad_top + ky;
              if (ih < 0 || ih >= geo.in_h) continue;
              for (Index kx = 0; kx < window && !done; ++kx) {
                const Index iw = ow * stride - geo.pad_left + kx;
                if (iw < 0 || iw >= geo.in_w) continue;
                if (in(n, ih, iw, c) == target) {
                  dx(n, ih, iw, c) += g(n, oh, ow, c);
                  done = true;
                }
              }
            }
          }
  });
}

template <typename S>
Var global_avg_pool(Tape<S>& t, Var x) {
  return t.record(sact::global_avg_pool(t.value(x)), {x}, [x](Tape<S>& t, Var self) {
    Tensor<S>& dx = t.grad(x);
    const Tensor<S>& g = t.grad(self);
    const Index hw = dx.height() * dx.width();
    for (Index n = 0; n < dx.batch(); ++n)
      for (Index p = 0; p < hw; ++p) dx.row(n * hw + p) += g.row(n) / S(hw);
  });
}

template <typename S>
Var dense(Tape<S>& t, Var features, Var weight, Var bias) {
  Tensor<S> y = dense_layer(t.value(features), t.value(weight), t.value(bias));
  return t.record(std::move(y), {features, weight, bias}, [features, weight, bias](Tape<S>& t, Var self) {
    const Tensor<S>& x = t.value(features);
    const Tensor<S>& g = t.grad(self);
    const Index c = x.channels(), k = g.channels();
    Eigen::Map<const typename Tensor<S>::RowMatrix> xm(x.data(), x.batch(), c);
    Eigen::Map<const typename Tensor<S>::RowMatrix> gm(g.data(), g.batch(), k);
    if (t.requires_grad(weight)) {
      Eigen::Map<typename Tensor<S>::RowMatrix> dw(t.grad(weight).data(), c, k);
      dw.noalias() += xm.transpose() * gm;
    }
    if (t.requires_grad(bias)) t.grad(bias).row(0) += gm.colwise().sum();
    if (t.requires_grad(features)) {
      Eigen::Map<const typename Tensor<S>::RowMatrix> w(t.value(weight).data(), c, k);
      Eigen::Map<typename Tensor<S>::RowMatrix> dx(t.grad(features).data(), x.batch(), c);
      dx.noalias() += gm * w.transpose();
    }
  });
}

template <typename S>
Var tile_scores(Tape<S>& t, Var scores, Index k) {
  const Tensor<S>& in = t.value(scores);
  expect_axis("ops::tile_scores", "channels", 1, in.channels());
  if (k <= 0) throw std::invalid_argument("tile_halting_scores: tile size must be >= 1");
  Tensor<S> y(in.shape());
  for (Index n = 0; n < in.batch(); ++n) {
    const Field<S> f = tile_halting_scores(field_of(in, n), k);
    for (Index i = 0; i < in.height(); ++i)
      for (Index j = 0; j < in.width(); ++j) y(n, i, j, 0) = f(i, j);
  }
  return t.record(std::move(y), {scores}, [scores, k](Tape<S>& t, Var self) {
    const Tensor<S>& g = t.grad(self);
    Tensor<S>& dx = t.grad(scores);
    const Index H = g.height(), W = g.width();
    for (Index n = 0; n < g.batch(); ++n)
      for (Index ti = 0; ti < H; ti += k)
        for (Index tj = 0; tj < W; tj += k) {
          const Index h = std::min(k, H - ti), w = std::min(k, W - tj);
          S sum = 0;
          for (Index i = ti; i < ti + h; ++i)
            for (Index j = tj; j < tj + w; ++j) sum += g(n, i, j, 0);
          const S share = sum / S(h * w);
          for (Index i = ti; i < ti + h; ++i)
            for (Index j = tj; j < tj + w; ++j) dx(n, i, j, 0) += share;
        }
  });
}

template <typename S>
Var spatial_mean(Tape<S>& t, Var field) {
  const Tensor<S>& in = t.value(field);
  expect_axis("ops::spatial_mean", "channels", 1, in.channels());
  Tensor<S> y(Shape{in.batch(), 1, 1, 1});
  for (Index n = 0; n < in.batch(); ++n) y[n] = PonderMap<S>{field_of(in, n), 0}.mean();
  return t.record(std::move(y), {field}, [field](Tape<S>& t, Var self) {
    Tensor<S>& dx = t.grad(field);
    const Tensor<S>& g = t.grad(self);
    const Index hw = dx.height() * dx.width();
    for (Index n = 0; n < dx.batch(); ++n)
      for (Index p = 0; p < hw; ++p) dx[n * hw + p] += g[n] / S(hw);
  });
}

template <typename S>
Var mean(Tape<S>& t, Var x) {
  const Tensor<S>& in = t.value(x);
  if (in.size() == 0) throw DimensionError("ops::mean", "size", 1, 0);
  return t.record(Tensor<S>::scalar(in.array().sum() / S(in.size())), {x}, [x](Tape<S>& t, Var self) {
    Tensor<S>& dx = t.grad(x);
    dx.array() += t.grad(self)[0] / S(dx.size());
  });
}

template <typename S>
Var softmax_cross_entropy(Tape<S>& t, Var logits, const std::vector<Index>& labels) {
  const Tensor<S>& z = t.value(logits);
  const Index B = z.batch(), K = z.channels();
  expect_axis("softmax_cross_entropy", "labels", B, static_cast<Index>(labels.size()));
  if (B == 0) throw DimensionError("softmax_cross_entropy", "batch", 1, 0);
  Tensor<S> prob(z.shape());
  S loss = 0;
  for (Index n = 0; n < B; ++n) {
    const Index y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= K) throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                                 std::to_string(K) + ")");
    const auto row = z.row(n).array();
    const S m = row.maxCoeff();
    const auto e = (row - m).exp().eval();
    const S total = e.sum();
    prob.row(n) = (e / total).matrix();
    loss += std::log(total) + m - row(y);
  }
  loss /= S(B);
  return t.record(Tensor<S>::scalar(loss), {logits}, [logits, labels, prob = std::move(prob)](Tape<S>& t, Var self) {
    Tensor<S>& dz = t.grad(logits);
    const S g = t.grad(self)[0] / S(prob.batch());
    for (Index n = 0; n < prob.batch(); ++n) {
      dz.row(n) += g * prob.row(n);
      dz(n, 0, 0, labels[static_cast<std::size_t>(n)]) -= g;
    }
  });
}

#define SACT_INSTANTIATE_OPS(S)                                                                          \
  template Var conv2d(Tape<S>&, Var, Var, const ConvSpec&);                                              \
  template Var batch_norm(Tape<S>&, Var, Var, Var, RunningStats<S>*, BnMode, const BatchNormConfig&);    \
  template Var relu(Tape<S>&, Var);                                                                      \
  template Var sigmoid(Tape<S>&, Var);                                                                   \
  template Var add(Tape<S>&, Var, Var);                                                                  \
  template Var sub(Tape<S>&, Var, Var);                                                                  \
  template Var mul(Tape<S>&, Var, Var);                                                                  \
  template Var scale(Tape<S>&, Var, S);                                                                  \
  template Var max_pool(Tape<S>&, Var, Index, Index);                                                    \
  template Var global_avg_pool(Tape<S>&, Var);                                                           \
  template Var dense(Tape<S>&, Var, Var, Var);                                                           \
  template Var tile_scores(Tape<S>&, Var, Index);                                                        \
  template Var spatial_mean(Tape<S>&, Var);                                                              \
  template Var mean(Tape<S>&, Var);                                                                      \
  template Var softmax_cross_entropy(Tape<S>&, Var, const std::vector<Index>&);

SACT_INSTANTIATE_OPS(float)
SACT_INSTANTIATE_OPS(double)

}  // namespace ops

// ---------------------------------------------------------------------------

bool GradReport::passed() const {
  if (skipped) return true;
  return std::all_of(params.begin(), params.end(), [](const ParamDeviation& p) { return p.passed; });
}

std::string GradReport::format() const {
  std::ostringstream os;
  if (skipped) {
    os << "skipped " << skip_reason << '\n';
    return os.str();
  }
  os.precision(6);
  for (const auto& p : params)
    os << "param " << p.name << " max_abs " << p.max_abs << " max_rel " << p.max_rel << ' '
       << (p.passed ? "PASS" : "FAIL") << '\n';
  if (discontinuous > 0) os << "discontinuous_coordinates " << discontinuous << '\n';
  return os.str();
}

GradReport finite_diff_check(const std::vector<ParamRef>& params,
                             const std::function<GradProbe(Tape<double>&)>& build, const GradCheckOptions& options) {
  GradReport report;
  Tape<double> tape;
  const GradProbe base = build(tape);
  if (base.halting_margin <= 10.0 * options.step) {
    report.skipped = true;
    std::ostringstream os;
    os << "halting margin " << base.halting_margin << " within 10*step of the threshold";
    report.skip_reason = os.str();
    return report;
  }
  tape.backward(base.loss);

  auto evaluate = [&](std::vector<bool>& pattern) {
    Tape<double> t;
    GradProbe probe = build(t);
    pattern = std::move(probe.pattern);
    return t.value(probe.loss).item();
  };

  std::mt19937_64 rng(options.seed);
  for (const auto& ref : params) {
    ParamDeviation dev;
    dev.name = ref.name;
    // Parameters the graph never reached (units after every position halted) have zero gradient.
    const Tensor<double> analytic =
        tape.find_parameter(ref.name) ? tape.gradient(ref.name) : Tensor<double>(ref.tensor->shape());
    const Index size = ref.tensor->size();
    std::vector<Index> coords(static_cast<std::size_t>(size));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (size > options.min_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.min_coordinates));
      std::sort(coords.begin(), coords.end());
    }
    for (Index i : coords) {
      double& theta = (*ref.tensor)[i];
      const double saved = theta;
      std::vector<bool> plus_pattern, minus_pattern;
      theta = saved + options.step;
      const double plus = evaluate(plus_pattern);
      theta = saved - options.step;
      const double minus = evaluate(minus_pattern);
      theta = saved;
      if (plus_pattern != base.pattern || minus_pattern != base.pattern) {
        ++report.discontinuous;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[i];
      const double abs_dev = std::abs(a - numeric);
      const double rel_dev = abs_dev / std::max({std::abs(a), std::abs(numeric), 1e-8});
      dev.max_abs = std::max(dev.max_abs, abs_dev);
      dev.max_rel = std::max(dev.max_rel, rel_dev);
      ++dev.checked;
      if (!(rel_dev <= options.rtol || abs_dev <= options.atol)) {
        ++dev.failed;
        dev.passed = false;
      }
    }
    report.params.push_back(std::move(dev));
  }
  return report;
}

}  // namespace sact
