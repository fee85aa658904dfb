#include "sact/gradcheck.hpp"

#include "sact/training.hpp"

#include <random>

namespace sact {

NetworkSpec toy_spec(HaltingMode mode) {
  NetworkSpec s;
  s.input_channels = 3;
  s.stem_channels = 8;
  s.stem_kernel = 3;
  s.stem_stride = 1;
  s.stem_pool = false;
  s.blocks = {BlockSpec{3, 8, 2, 1}, BlockSpec{3, 12, 3, 2}};
  s.halting = mode;
  s.classes = 3;
  return s;
}

GradReport check_network_gradients(const NetworkSpec& spec, std::uint64_t seed, const NetworkGradCheck& config) {
  std::mt19937_64 rng(seed);
  NetworkParams<double> params = initialize_network<double>(spec, rng());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> bias(-1.5, 0.5), gain(0.5, 1.5);
  for_each_parameter<double>(params, [&](const std::string&, Tensor<double>& t, ParamKind kind) {
    if (kind == ParamKind::halting_bias)
      for (double& v : t.values()) v = bias(rng);
  });
  for (auto& block : params.blocks)
    for (auto& u : block.units)
      for (auto* bn : {&u.preact, &u.mid, &u.last}) {
        for (double& v : bn->scale.values()) v = gain(rng);
        for (double& v : bn->offset.values()) v = 0.1 * normal(rng);
      }
  for (double& v : params.fc_bias.values()) v = 0.1 * normal(rng);

  const Shape shape{config.batch, config.resolution, config.resolution, spec.input_channels};
  std::uniform_int_distribution<Index> label(0, spec.classes - 1);
  GraphOptions opt;
  opt.bn = BnMode::train;
  opt.tau = config.tau;
  opt.record_kinks = true;

  Tensor<double> images(shape);
  std::vector<Index> labels;
  auto build = [&](Tape<double>& tape) {
    auto g = build_training_graph(tape, params, images, labels, opt);
    // A coordinate whose perturbation moves a ReLU input across zero straddles a kink; it is
    // screened out like a halting flip.
    g.pattern.insert(g.pattern.end(), g.kinks.begin(), g.kinks.end());
    return GradProbe{g.objective, g.halting_margin, std::move(g.pattern)};
  };
  for (Index attempt = 0;; ++attempt) {
    for (double& v : images.values()) v = normal(rng);
    labels.clear();
    for (Index n = 0; n < config.batch; ++n) labels.push_back(label(rng));
    Tape<double> tape;
    if (build(tape).halting_margin >= config.min_margin) break;
    if (attempt + 1 >= config.max_attempts) break;  // finite_diff_check reports the skip
  }

  std::vector<ParamRef> refs;
  for_each_parameter<double>(params, [&](const std::string& name, Tensor<double>& t, ParamKind kind) {
    if (is_trainable(kind)) refs.push_back(ParamRef{name, &t});
  });
  GradCheckOptions fd = config.fd;
  fd.seed = seed;
  return finite_diff_check(refs, build, fd);
}

}  // namespace sact
