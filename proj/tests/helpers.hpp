#pragma once

#include "sact/network.hpp"
#include "sact/training.hpp"

#include <random>

namespace sact::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor<double> t(shape);
  std::normal_distribution<double> n(0.0, sd);
  for (double& v : t.values()) v = n(rng);
  return t;
}

/// Unit with random kernels and non-trivial BN layers (scale/variance positive).
inline ResidualUnitParams<double> random_unit(std::mt19937_64& rng, Index in, Index bottleneck, Index out,
                                              Index stride) {
  auto u = ResidualUnitParams<double>::zeros(in, bottleneck, out, stride);
  std::normal_distribution<double> n(0.0, 0.5);
  std::uniform_real_distribution<double> pos(0.5, 1.5);
  auto fill = [&](Tensor<double>& t) {
    for (double& v : t.values()) v = n(rng);
  };
  for (auto* bn : {&u.preact, &u.mid, &u.last}) {
    for (double& v : bn->scale.values()) v = pos(rng);
    fill(bn->offset);
    fill(bn->stats.mean);
    for (double& v : bn->stats.variance.values()) v = pos(rng);
  }
  fill(u.reduce.kernel);
  fill(u.spatial.kernel);
  fill(u.restore.kernel);
  if (u.projection) fill(u.projection->kernel);
  return u;
}

/// Seeded network with random BN layers and halting biases in [-2, 1].
inline NetworkParams<double> random_network(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = initialize_network<double>(spec, rng());
  std::uniform_real_distribution<double> bias(-2.0, 1.0), pos(0.5, 1.5);
  std::normal_distribution<double> n(0.0, 0.3);
  for_each_parameter<double>(p, [&](const std::string& name, Tensor<double>& t, ParamKind kind) {
    if (kind == ParamKind::halting_bias) {
      for (double& v : t.values()) v = bias(rng);
    } else if (kind == ParamKind::norm || kind == ParamKind::running_stat) {
      const bool positive = name.ends_with("scale") || name.ends_with("variance");
      for (double& v : t.values()) v = positive ? pos(rng) : n(rng);
    }
  });
  return p;
}

}  // namespace sact::testing
