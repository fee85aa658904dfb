#pragma once

#include "sact/network.hpp"

#include <cstdint>

namespace sact {

/// Small network for finite-difference checks: 8x8x3 input, stride-1 stem, two blocks of three
/// units, three classes.
NetworkSpec toy_spec(HaltingMode mode);

struct NetworkGradCheck {
  Index batch = 2;
  Index resolution = 8;
  double tau = 0.0;
  /// Redraw inputs until every halting sum is at least this far from 1 - eps.
  double min_margin = 1e-3;
  Index max_attempts = 50;
  GradCheckOptions fd;
};

/// Training objective of a seeded random network (train-mode BN) checked against central
/// differences for every trainable tensor. Halting biases are drawn so that halting happens
/// inside the blocks rather than always at the last unit.
GradReport check_network_gradients(const NetworkSpec& spec, std::uint64_t seed, const NetworkGradCheck& config = {});

}  // namespace sact
