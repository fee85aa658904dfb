#pragma once

#include "sact/residual.hpp"

#include <cstdint>
#include <vector>

namespace sact {

/// Multiply-add counted as two operations: 2 * H_out * W_out * C_out * kh * kw * C_in.
std::int64_t conv_flops(Index out_positions, const ConvSpec& spec);

struct UnitFlops {
  std::int64_t reduce = 0;
  std::int64_t spatial = 0;
  std::int64_t restore = 0;
  std::int64_t projection = 0;

  std::int64_t total() const { return reduce + spatial + restore + projection; }
};

struct BlockFlops {
  std::vector<UnitFlops> units;
  std::int64_t halting = 0;  // halting-score layers, not part of the headline count

  std::int64_t total() const;
};

/// Convolution-only FLOPs. Halting layers and the classifier are reported under `aux`.
struct FlopsBreakdown {
  std::int64_t stem = 0;
  std::vector<BlockFlops> blocks;
  std::int64_t head = 0;

  std::int64_t total() const;
  std::int64_t aux() const;
};

FlopsBreakdown count_flops(const NetworkSpec& spec, Index height, Index width);
inline FlopsBreakdown count_flops(const NetworkSpec& spec, Index resolution) {
  return count_flops(spec, resolution, resolution);
}

/// What one unit actually computed for one example.
struct UnitEvaluation {
  Index first_layer_positions = 0;  // positions where the reduce conv ran (input resolution)
  Index active_positions = 0;       // positions where the 3x3 / restore / projection convs ran
  Index halting_positions = 0;      // positions where a spatial halting score was computed

  bool evaluated() const { return active_positions > 0; }
};

/// Per block, per unit evaluation counts for one example. Missing trailing units count as skipped.
struct EvaluationRecord {
  std::vector<std::vector<UnitEvaluation>> blocks;
};

/// Record of a non-adaptive pass: every unit dense.
EvaluationRecord dense_record(const NetworkSpec& spec, Index height, Index width);

FlopsBreakdown count_flops_adaptive(const NetworkSpec& spec, const EvaluationRecord& record, Index height,
                                    Index width);

/// Spatial extent at the input of each block, and at the output of the last.
std::vector<std::pair<Index, Index>> block_resolutions(const NetworkSpec& spec, Index height, Index width);

}  // namespace sact
