#include "sact/flops.hpp"

#include <numeric>

namespace sact {

std::int64_t conv_flops(Index out_positions, const ConvSpec& spec) {
  return 2 * out_positions * spec.out_channels * spec.kernel_h * spec.kernel_w * spec.in_channels;
}

std::int64_t BlockFlops::total() const {
  return std::accumulate(units.begin(), units.end(), std::int64_t{0},
                         [](std::int64_t acc, const UnitFlops& u) { return acc + u.total(); });
}

std::int64_t FlopsBreakdown::total() const {
  return std::accumulate(blocks.begin(), blocks.end(), stem,
                         [](std::int64_t acc, const BlockFlops& b) { return acc + b.total(); });
}

std::int64_t FlopsBreakdown::aux() const {
  return std::accumulate(blocks.begin(), blocks.end(), head,
                         [](std::int64_t acc, const BlockFlops& b) { return acc + b.halting; });
}

namespace {

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

struct UnitConvs {
  ConvSpec reduce, spatial, restore;
  bool projection = false;
  ConvSpec shortcut;
};

UnitConvs unit_convs(const NetworkSpec& spec, std::size_t k, std::size_t l) {
  const auto& b = spec.blocks[k];
  const Index in = spec.unit_input_channels(k, l);
  const Index stride = l == 0 ? b.stride : 1;
  UnitConvs u;
  u.reduce = ConvSpec{1, 1, in, b.bottleneck, 1, Padding::same};
  u.spatial = ConvSpec{3, 3, b.bottleneck, b.bottleneck, stride, Padding::same};
  u.restore = ConvSpec{1, 1, b.bottleneck, b.channels, 1, Padding::same};
  u.projection = stride != 1 || in != b.channels;
  u.shortcut = ConvSpec{1, 1, in, b.channels, stride, Padding::same};
  return u;
}

std::int64_t halting_flops(const NetworkSpec& spec, Index channels, Index halting_positions) {
  switch (spec.halting) {
    case HaltingMode::none: return 0;
    case HaltingMode::act: return 2 * channels;
    case HaltingMode::sact: return 2 * channels + 2 * 9 * channels * halting_positions;
  }
  return 0;
}

}  // namespace

std::vector<std::pair<Index, Index>> block_resolutions(const NetworkSpec& spec, Index height, Index width) {
  Index h = ceil_div(height, spec.stem_stride);
  Index w = ceil_div(width, spec.stem_stride);
  if (spec.stem_pool) {
    h = ceil_div(h, 2);
    w = ceil_div(w, 2);
  }
  std::vector<std::pair<Index, Index>> res{{h, w}};
  for (const auto& b : spec.blocks) {
    h = ceil_div(h, b.stride);
    w = ceil_div(w, b.stride);
    res.emplace_back(h, w);
  }
  return res;
}

FlopsBreakdown count_flops(const NetworkSpec& spec, Index height, Index width) {
  spec.validate();
  FlopsBreakdown out;
  const ConvSpec stem = spec.stem_conv();
  out.stem = conv_flops(stem.output_height(height) * stem.output_width(width), stem);
  const auto res = block_resolutions(spec, height, width);
  for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
    BlockFlops bf;
    const auto [in_h, in_w] = res[k];
    const auto [out_h, out_w] = res[k + 1];
    for (Index l = 0; l < spec.blocks[k].units; ++l) {
      const UnitConvs c = unit_convs(spec, k, static_cast<std::size_t>(l));
      const Index ih = l == 0 ? in_h : out_h;
      const Index iw = l == 0 ? in_w : out_w;
      UnitFlops uf;
      uf.reduce = conv_flops(ih * iw, c.reduce);
      uf.spatial = conv_flops(out_h * out_w, c.spatial);
      uf.restore = conv_flops(out_h * out_w, c.restore);
      if (c.projection) uf.projection = conv_flops(out_h * out_w, c.shortcut);
      bf.units.push_back(uf);
      if (l + 1 < spec.blocks[k].units) bf.halting += halting_flops(spec, spec.blocks[k].channels, out_h * out_w);
    }
    out.blocks.push_back(std::move(bf));
  }
  out.head = 2 * spec.blocks.back().channels * spec.classes;
  return out;
}

EvaluationRecord dense_record(const NetworkSpec& spec, Index height, Index width) {
  const auto res = block_resolutions(spec, height, width);
  EvaluationRecord rec;
  for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
    std::vector<UnitEvaluation> units;
    const Index in_pos = res[k].first * res[k].second;
    const Index out_pos = res[k + 1].first * res[k + 1].second;
    for (Index l = 0; l < spec.blocks[k].units; ++l) {
      const bool halting = l + 1 < spec.blocks[k].units;
      units.push_back(UnitEvaluation{l == 0 ? in_pos : out_pos, out_pos, halting ? out_pos : 0});
    }
    rec.blocks.push_back(std::move(units));
  }
  return rec;
}

FlopsBreakdown count_flops_adaptive(const NetworkSpec& spec, const EvaluationRecord& record, Index height,
                                    Index width) {
  spec.validate();
  if (record.blocks.size() != spec.blocks.size())
    throw std::invalid_argument("count_flops_adaptive: record has " + std::to_string(record.blocks.size()) +
                                " blocks, spec has " + std::to_string(spec.blocks.size()));
  const auto res = block_resolutions(spec, height, width);
  FlopsBreakdown out;
  const ConvSpec stem = spec.stem_conv();
  out.stem = conv_flops(stem.output_height(height) * stem.output_width(width), stem);
  for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
    const auto& units = record.blocks[k];
    const Index L = spec.blocks[k].units;
    if (static_cast<Index>(units.size()) > L)
      throw std::invalid_argument("count_flops_adaptive: block " + std::to_string(k + 1) + " records " +
                                  std::to_string(units.size()) + " units, spec has " + std::to_string(L));
    const Index in_pos = res[k].first * res[k].second;
    const Index out_pos = res[k + 1].first * res[k + 1].second;
    BlockFlops bf;
    for (Index l = 0; l < L; ++l) {
      UnitFlops uf;
      if (static_cast<std::size_t>(l) < units.size()) {
        const auto& ev = units[static_cast<std::size_t>(l)];
        const Index max_first = l == 0 ? in_pos : out_pos;
        if (ev.first_layer_positions > max_first || ev.active_positions > out_pos ||
            ev.halting_positions > out_pos)
          throw std::invalid_argument("count_flops_adaptive: position count exceeds block resolution in block " +
                                      std::to_string(k + 1) + " unit " + std::to_string(l + 1));
        const UnitConvs c = unit_convs(spec, k, static_cast<std::size_t>(l));
        uf.reduce = conv_flops(ev.first_layer_positions, c.reduce);
        uf.spatial = conv_flops(ev.active_positions, c.spatial);
        uf.restore = conv_flops(ev.active_positions, c.restore);
        if (c.projection) uf.projection = conv_flops(ev.active_positions, c.shortcut);
        if (ev.evaluated() && l + 1 < L)
          bf.halting += halting_flops(spec, spec.blocks[k].channels, ev.halting_positions);
      }
      bf.units.push_back(uf);
    }
    out.blocks.push_back(std::move(bf));
  }
  out.head = 2 * spec.blocks.back().channels * spec.classes;
  return out;
}

}  // namespace sact
