#include "sact/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace sact {

double LrSchedule::at(Index epoch) const {
  if (interval <= 0) return initial;
  return initial * std::pow(decay, static_cast<double>(epoch / interval));
}

std::string_view to_string(Precision p) { return p == Precision::float32 ? "single" : "double"; }

Precision parse_precision(std::string_view text) {
  if (text == "single") return Precision::float32;
  if (text == "double") return Precision::float64;
  throw std::invalid_argument("unknown precision '" + std::string(text) + "' (expected single or double)");
}

void TrainConfig::validate() const {
  if (!(tau >= 0.0)) throw std::invalid_argument("train: tau must be >= 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("train: epsilon must lie in (0, 1)");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (!(lr.initial > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
}

template <typename Scalar>
void sgd_momentum_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad, Tensor<Scalar>& velocity, double lr,
                       double momentum, double weight_decay) {
  expect_axis("sgd_momentum_step", "size", param.size(), grad.size());
  if (velocity.empty()) velocity = Tensor<Scalar>(param.shape());
  expect_axis("sgd_momentum_step", "velocity", param.size(), velocity.size());
  velocity.array() = Scalar(momentum) * velocity.array() + (grad.array() + Scalar(weight_decay) * param.array());
  param.array() -= Scalar(lr) * velocity.array();
}

template <typename Scalar>
void sgd_momentum_step(NetworkParams<Scalar>& params, const Tape<Scalar>& tape, OptimizerState<Scalar>& state,
                       double lr, double momentum, double weight_decay) {
  for_each_parameter<Scalar>(params, [&](const std::string& name, Tensor<Scalar>& t, ParamKind kind) {
    if (!is_trainable(kind)) return;
    const auto var = tape.find_parameter(name);
    if (!var) return;
    const Tensor<Scalar> g = tape.grad_or_zero(*var);
    sgd_momentum_step(t, g, state.velocity[name], lr, momentum, kind == ParamKind::weight ? weight_decay : 0.0);
  });
}

// ---------------------------------------------------------------------------

template <typename Scalar>
NetworkParams<Scalar> initialize_network(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkParams<Scalar> p = NetworkParams<Scalar>::zeros(spec);
  std::mt19937_64 rng(seed);
  for_each_parameter<Scalar>(p, [&](const std::string&, Tensor<Scalar>& t, ParamKind kind) {
    if (kind == ParamKind::halting_bias) {
      t.array().setConstant(Scalar(kHaltingBiasInit));
    } else if (kind == ParamKind::weight) {
      const Shape s = t.shape();
      const double fan_in = static_cast<double>(s.batch * s.height * s.width);
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
      for (Scalar& v : t.values()) v = static_cast<Scalar>(normal(rng));
    }
  });
  return p;
}

template <typename Scalar>
NetworkParams<Scalar> initialize_two_stage(const NetworkSpec& spec, const Checkpoint& backbone, std::uint64_t seed) {
  NetworkParams<Scalar> p = initialize_network<Scalar>(spec, seed);
  Checkpoint filtered;
  for (const auto& e : backbone.entries)
    if (!is_halting(e.name)) filtered.entries.push_back(e);
  std::vector<std::string> problems;
  for_each_parameter<Scalar>(p, [&](const std::string& name, Tensor<Scalar>&, ParamKind) {
    if (!is_halting(name) && filtered.find(name) == nullptr) problems.push_back(name + ": missing from checkpoint");
  });
  if (!problems.empty()) throw CheckpointMismatch(std::move(problems));
  load_into(p, filtered, /*strict=*/false);
  return p;
}

std::vector<Index> derive_baseline_units(std::span<const double> mean_units, std::span<const Index> max_units) {
  if (mean_units.size() != max_units.size())
    throw std::invalid_argument("derive_baseline_units: " + std::to_string(mean_units.size()) + " means for " +
                                std::to_string(max_units.size()) + " blocks");
  std::vector<Index> out;
  for (std::size_t k = 0; k < mean_units.size(); ++k)
    out.push_back(std::clamp<Index>(static_cast<Index>(std::round(mean_units[k])), 1, max_units[k]));
  return out;
}

// ---------------------------------------------------------------------------

std::string format_epoch(const EpochRecord& rec) {
  std::ostringstream os;
  os.precision(9);
  os << rec.epoch << '\t' << rec.loss;
  for (double v : rec.ponder) os << '\t' << v;
  for (double v : rec.units) os << '\t' << v;
  os << '\t' << rec.accuracy << '\t' << rec.flops;
  return os.str();
}

std::string format_dead_units(const EpochRecord& rec) {
  std::ostringstream os;
  os.precision(9);
  os << rec.epoch;
  for (double v : rec.last_unit_fraction) os << '\t' << v;
  return os.str();
}

namespace {

Index argmax_row(const Tensor<float>& t, Index n) {
  Index best = 0;
  t.row(n).maxCoeff(&best);
  return best;
}
Index argmax_row(const Tensor<double>& t, Index n) {
  Index best = 0;
  t.row(n).maxCoeff(&best);
  return best;
}

std::vector<std::span<const Index>> batches_of(const std::vector<Index>& order, Index batch_size) {
  std::vector<std::span<const Index>> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(batch_size));
    out.emplace_back(order.data() + start, len);
  }
  return out;
}

}  // namespace

template <typename Scalar>
void recalibrate_batch_norm(NetworkParams<Scalar>& params, const Dataset& data, Index batch_size) {
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Index seen = 0;
  for (auto idx : batches_of(order, batch_size)) {
    ++seen;
    Tape<Scalar> tape;
    GraphOptions opt;
    opt.bn = BnMode::train;
    opt.update_running_stats = true;
    opt.norm.decay = static_cast<double>(seen - 1) / static_cast<double>(seen);
    build_training_graph(tape, params, data.images<Scalar>(idx), data.labels_of(idx), opt);
  }
}

template <typename Scalar>
TrainResult<Scalar> train(NetworkParams<Scalar> params, const Dataset& data, const TrainConfig& config,
                          std::ostream* log, const std::function<void(const NetworkParams<Scalar>&)>& on_abort) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train: dataset is empty");
  if (data.channels != params.spec.input_channels || data.classes != params.spec.classes)
    throw std::invalid_argument("train: dataset channels/classes do not match the architecture");
  params.spec.tau = config.tau;
  params.spec.epsilon = config.epsilon;

  const std::size_t K = params.blocks.size();
  TrainResult<Scalar> result;
  OptimizerState<Scalar> opt;
  std::mt19937_64 rng(config.seed);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});

  Index step = 0;
  for (Index epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = config.lr.at(epoch - 1);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.ponder.assign(K, 0.0);
    rec.units.assign(K, 0.0);
    rec.last_unit_fraction.assign(K, 0.0);
    Index correct = 0, batches = 0;
    for (auto idx : batches_of(order, config.batch_size)) {
      const Tensor<Scalar> images = data.images<Scalar>(idx);
      const std::vector<Index> labels = data.labels_of(idx);
      const NetworkParams<Scalar> last_good = params;

      Tape<Scalar> tape;
      GraphOptions gopt;
      gopt.bn = BnMode::train;
      gopt.update_running_stats = true;
      gopt.tau = config.tau;
      const TrainingGraph<Scalar> g = build_training_graph(tape, params, images, labels, gopt);
      const double objective = tape.value(g.objective).item();
      if (!std::isfinite(objective)) {
        if (on_abort) on_abort(last_good);
        throw NonFiniteLoss("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(step + 1));
      }
      tape.backward(g.objective);
      sgd_momentum_step(params, tape, opt, lr, config.momentum, config.weight_decay);

      StepRecord sr;
      sr.epoch = epoch;
      sr.step = ++step;
      sr.task_loss = tape.value(g.task_loss).item();
      sr.objective = objective;
      for (const Var v : g.block_ponder) sr.ponder.push_back(tape.value(v).array().mean());
      rec.loss += sr.task_loss;
      for (std::size_t k = 0; k < K; ++k) {
        if (!g.block_ponder.empty()) rec.ponder[k] += tape.value(g.block_ponder[k]).array().sum();
        for (std::size_t b = 0; b < idx.size(); ++b) {
          rec.units[k] += g.units[k][b];
          rec.last_unit_fraction[k] += g.reached_last[k][b] ? 1.0 : 0.0;
        }
      }
      const Tensor<Scalar>& logits = tape.value(g.logits);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        if (argmax_row(logits, static_cast<Index>(b)) == labels[b]) ++correct;
        rec.flops += static_cast<double>(
            count_flops_adaptive(params.spec, g.records[b], data.height, data.width).total());
      }
      ++batches;
      result.steps.push_back(std::move(sr));
    }
    const double n = static_cast<double>(data.size());
    rec.loss /= static_cast<double>(batches);
    for (std::size_t k = 0; k < K; ++k) {
      rec.ponder[k] /= n;
      rec.units[k] /= n;
      rec.last_unit_fraction[k] /= n;
    }
    if (params.spec.halting == HaltingMode::none)
      for (std::size_t k = 0; k < K; ++k) rec.ponder[k] = static_cast<double>(params.blocks[k].units.size() + 1);
    rec.accuracy = static_cast<double>(correct) / n;
    rec.flops /= n;
    if (log) *log << format_epoch(rec) << '\n';
    result.epochs.push_back(std::move(rec));
  }
  if (config.recalibrate_bn) recalibrate_batch_norm(params, data, config.batch_size);
  result.params = std::move(params);
  return result;
}

template <typename Scalar>
EvalSummary evaluate(const NetworkParams<Scalar>& params, const Dataset& data, Index batch_size) {
  const std::size_t K = params.blocks.size();
  EvalSummary s;
  s.units.assign(K, 0.0);
  s.ponder.assign(K, 0.0);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Index correct = 0;
  for (auto idx : batches_of(order, batch_size)) {
    const auto out = network_forward(params, data.images<Scalar>(idx));
    const auto labels = data.labels_of(idx);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (argmax_row(out.logits, static_cast<Index>(b)) == labels[b]) ++correct;
      for (std::size_t k = 0; k < K; ++k) {
        s.units[k] += out.units[k][b];
        s.ponder[k] += static_cast<double>(out.ponder[k][b]);
      }
      s.flops += static_cast<double>(count_flops_adaptive(params.spec, out.records[b], data.height, data.width).total());
    }
  }
  s.count = data.size();
  if (s.count > 0) {
    const double n = static_cast<double>(s.count);
    s.accuracy = static_cast<double>(correct) / n;
    s.flops /= n;
    for (std::size_t k = 0; k < K; ++k) {
      s.units[k] /= n;
      s.ponder[k] /= n;
    }
  }
  return s;
}

#define SACT_INSTANTIATE_TRAINING(S)                                                                               \
  template void sgd_momentum_step(Tensor<S>&, const Tensor<S>&, Tensor<S>&, double, double, double);              \
  template void sgd_momentum_step(NetworkParams<S>&, const Tape<S>&, OptimizerState<S>&, double, double, double); \
  template NetworkParams<S> initialize_network(const NetworkSpec&, std::uint64_t);                                \
  template NetworkParams<S> initialize_two_stage(const NetworkSpec&, const Checkpoint&, std::uint64_t);           \
  template void recalibrate_batch_norm(NetworkParams<S>&, const Dataset&, Index);                                 \
  template TrainResult<S> train(NetworkParams<S>, const Dataset&, const TrainConfig&, std::ostream*,              \
                                const std::function<void(const NetworkParams<S>&)>&);                             \
  template EvalSummary evaluate(const NetworkParams<S>&, const Dataset&, Index);

SACT_INSTANTIATE_TRAINING(float)
SACT_INSTANTIATE_TRAINING(double)

}  // namespace sact
