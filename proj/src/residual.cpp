#include "sact/residual.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace sact {

std::string_view to_string(HaltingMode mode) {
  switch (mode) {
    case HaltingMode::none: return "none";
    case HaltingMode::act: return "act";
    case HaltingMode::sact: return "sact";
  }
  return "none";
}

HaltingMode parse_halting_mode(std::string_view text) {
  if (text == "none") return HaltingMode::none;
  if (text == "act") return HaltingMode::act;
  if (text == "sact") return HaltingMode::sact;
  throw std::invalid_argument("unknown halting mode '" + std::string(text) + "' (expected none, act or sact)");
}

void NetworkSpec::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("NetworkSpec: " + what);
  };
  require(input_channels >= 1, "input_channels must be >= 1");
  require(stem_channels >= 1, "stem.channels must be >= 1");
  require(stem_kernel >= 1 && stem_stride >= 1, "stem kernel and stride must be >= 1");
  require(!blocks.empty(), "at least one block is required");
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& b = blocks[k];
    const std::string name = "block" + std::to_string(k + 1);
    require(b.units >= 1, name + ".units must be >= 1");
    require(b.channels >= 1 && b.bottleneck >= 1, name + " widths must be >= 1");
    require(b.stride >= 1, name + ".stride must be >= 1");
  }
  require(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
  require(tau >= 0.0, "tau must be >= 0");
  require(classes >= 1, "classes must be >= 1");
  require(tile >= 1, "tile must be >= 1");
}

ConvSpec NetworkSpec::stem_conv() const {
  return ConvSpec{stem_kernel, stem_kernel, input_channels, stem_channels, stem_stride, Padding::same};
}

Index NetworkSpec::unit_input_channels(std::size_t block, std::size_t unit) const {
  if (unit > 0) return blocks[block].channels;
  return block == 0 ? stem_channels : blocks[block - 1].channels;
}

namespace {
NetworkSpec bottleneck_resnet(std::vector<Index> units) {
  NetworkSpec s;
  s.input_channels = 3;
  s.stem_channels = 64;
  s.classes = 1000;
  const Index widths[] = {256, 512, 1024, 2048};
  for (std::size_t k = 0; k < units.size(); ++k)
    s.blocks.push_back(BlockSpec{units[k], widths[k], widths[k] / 4, k == 0 ? 1 : 2});
  return s;
}
}  // namespace

NetworkSpec desk_spec() {
  NetworkSpec s;
  s.input_channels = 3;
  s.stem_channels = 16;
  s.classes = 4;
  const Index widths[] = {16, 32, 64, 128};
  for (std::size_t k = 0; k < 4; ++k) s.blocks.push_back(BlockSpec{2, widths[k], widths[k] / 4, k == 0 ? 1 : 2});
  return s;
}

NetworkSpec resnet50_spec() { return bottleneck_resnet({3, 4, 6, 3}); }
NetworkSpec resnet101_spec() { return bottleneck_resnet({3, 4, 23, 3}); }

// ---------------------------------------------------------------------------
// Config text

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

Index parse_int(std::string_view key, std::string_view v) {
  Index out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw std::invalid_argument("config: key '" + std::string(key) + "' expects an integer, got '" + std::string(v) + "'");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw std::invalid_argument("config: key '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + std::string(key) + "' expects true/false");
}

}  // namespace

std::string format_config(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "input_channels=" << spec.input_channels << '\n'
     << "stem.channels=" << spec.stem_channels << '\n'
     << "stem.kernel=" << spec.stem_kernel << '\n'
     << "stem.stride=" << spec.stem_stride << '\n'
     << "stem.pool=" << (spec.stem_pool ? "true" : "false") << '\n'
     << "blocks=" << spec.blocks.size() << '\n';
  for (std::size_t k = 0; k < spec.blocks.size(); ++k) {
    const auto& b = spec.blocks[k];
    const std::string p = "block" + std::to_string(k + 1) + '.';
    os << p << "units=" << b.units << '\n'
       << p << "channels=" << b.channels << '\n'
       << p << "bottleneck=" << b.bottleneck << '\n'
       << p << "stride=" << b.stride << '\n';
  }
  os << "halting=" << to_string(spec.halting) << '\n'
     << "epsilon=" << format_double(spec.epsilon) << '\n'
     << "tau=" << format_double(spec.tau) << '\n'
     << "classes=" << spec.classes << '\n'
     << "tile=" << spec.tile << '\n';
  return os.str();
}

NetworkSpec parse_config(std::string_view text) {
  NetworkSpec spec;
  spec.blocks.clear();
  std::map<Index, std::map<std::string, Index>> block_keys;
  Index declared_blocks = -1;

  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));

    if (key == "input_channels") spec.input_channels = parse_int(key, value);
    else if (key == "stem.channels") spec.stem_channels = parse_int(key, value);
    else if (key == "stem.kernel") spec.stem_kernel = parse_int(key, value);
    else if (key == "stem.stride") spec.stem_stride = parse_int(key, value);
    else if (key == "stem.pool") spec.stem_pool = parse_bool(key, value);
    else if (key == "blocks") declared_blocks = parse_int(key, value);
    else if (key == "halting") spec.halting = parse_halting_mode(value);
    else if (key == "epsilon") spec.epsilon = parse_double(key, value);
    else if (key == "tau") spec.tau = parse_double(key, value);
    else if (key == "classes") spec.classes = parse_int(key, value);
    else if (key == "tile") spec.tile = parse_int(key, value);
    else if (key.starts_with("block")) {
      const auto dot = key.find('.');
      if (dot == std::string_view::npos) throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
      const Index k = parse_int(key, key.substr(5, dot - 5));
      const std::string field(key.substr(dot + 1));
      if (k < 1 || (field != "units" && field != "channels" && field != "bottleneck" && field != "stride"))
        throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
      block_keys[k][field] = parse_int(key, value);
    } else {
      throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
    }
  }

  const Index count = declared_blocks >= 0 ? declared_blocks : (block_keys.empty() ? 0 : block_keys.rbegin()->first);
  if (!block_keys.empty() && block_keys.rbegin()->first > count)
    throw std::invalid_argument("config: block index exceeds declared blocks=" + std::to_string(count));
  for (Index k = 1; k <= count; ++k) {
    auto it = block_keys.find(k);
    const std::string p = "block" + std::to_string(k);
    if (it == block_keys.end() || !it->second.contains("units") || !it->second.contains("channels"))
      throw std::invalid_argument("config: " + p + ".units and " + p + ".channels are required");
    BlockSpec b;
    b.units = it->second.at("units");
    b.channels = it->second.at("channels");
    b.bottleneck = it->second.contains("bottleneck") ? it->second.at("bottleneck") : std::max<Index>(b.channels / 4, 1);
    b.stride = it->second.contains("stride") ? it->second.at("stride") : (k == 1 ? 1 : 2);
    spec.blocks.push_back(b);
  }
  spec.validate();
  return spec;
}

NetworkSpec load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open architecture config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> bn_relu_infer(const Tensor<Scalar>& x, const BatchNormLayer<Scalar>& bn, const BatchNormConfig& config) {
  if (!bn.stats.initialized()) throw std::logic_error("batch_norm: infer mode requires initialized running statistics");
  return relu(batch_normalize(x, bn.stats.mean, bn.stats.variance, bn.scale, bn.offset, config.epsilon));
}

template <typename Scalar>
ResidualUnitParams<Scalar> ResidualUnitParams<Scalar>::zeros(Index in_channels, Index bottleneck, Index out_channels,
                                                             Index stride) {
  ResidualUnitParams u;
  u.preact = BatchNormLayer<Scalar>::identity(in_channels);
  u.reduce.spec = ConvSpec{1, 1, in_channels, bottleneck, 1, Padding::same};
  u.reduce.kernel = Tensor<Scalar>(u.reduce.spec.kernel_shape());
  u.mid = BatchNormLayer<Scalar>::identity(bottleneck);
  u.spatial.spec = ConvSpec{3, 3, bottleneck, bottleneck, stride, Padding::same};
  u.spatial.kernel = Tensor<Scalar>(u.spatial.spec.kernel_shape());
  u.last = BatchNormLayer<Scalar>::identity(bottleneck);
  u.restore.spec = ConvSpec{1, 1, bottleneck, out_channels, 1, Padding::same};
  u.restore.kernel = Tensor<Scalar>(u.restore.spec.kernel_shape());
  if (stride != 1 || in_channels != out_channels) {
    ConvLayer<Scalar> proj;
    proj.spec = ConvSpec{1, 1, in_channels, out_channels, stride, Padding::same};
    proj.kernel = Tensor<Scalar>(proj.spec.kernel_shape());
    u.projection = std::move(proj);
  }
  return u;
}

template <typename Scalar>
Tensor<Scalar> residual_unit_forward(const Tensor<Scalar>& x, const ResidualUnitParams<Scalar>& unit) {
  expect_axis("residual_unit_forward", "channels", unit.in_channels(), x.channels());
  const Tensor<Scalar> pre = bn_relu_infer(x, unit.preact);
  Tensor<Scalar> r = conv2d(pre, unit.reduce.kernel, unit.reduce.spec);
  r = conv2d(bn_relu_infer(r, unit.mid), unit.spatial.kernel, unit.spatial.spec);
  r = conv2d(bn_relu_infer(r, unit.last), unit.restore.kernel, unit.restore.spec);
  if (unit.projection) {
    r.array() = conv2d(pre, unit.projection->kernel, unit.projection->spec).array() + r.array();
  } else {
    expect_axis("residual_unit_forward", "height", x.height(), r.height());
    r.array() = x.array() + r.array();
  }
  return r;
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> perforated_residual_apply(const Tensor<Scalar>& x_hat, const ResidualUnitParams<Scalar>& unit,
                                         const ActiveMask& mask, const ActiveMask& first_layer_set,
                                         PerforationCounts* counts) {
  if (unit.stride() != 1 || unit.projection)
    throw UnsupportedConfiguration("perforated_residual_apply: only stride-1 units without projection are supported");
  expect_axis("perforated_residual_apply", "channels", unit.in_channels(), x_hat.channels());
  expect_axis("perforated_residual_apply", "mask_height", x_hat.height(), mask.rows());
  expect_axis("perforated_residual_apply", "mask_width", x_hat.width(), mask.cols());

  const Tensor<Scalar> pre = bn_relu_infer(x_hat, unit.preact);
  Tensor<Scalar> r = conv2d_at(pre, unit.reduce.kernel, unit.reduce.spec, first_layer_set);
  r = conv2d_at(bn_relu_infer(r, unit.mid), unit.spatial.kernel, unit.spatial.spec, mask);
  r = conv2d_at(bn_relu_infer(r, unit.last), unit.restore.kernel, unit.restore.spec, mask);

  Tensor<Scalar> out = x_hat;
  for (Index n = 0; n < x_hat.batch(); ++n)
    for (Index i = 0; i < x_hat.height(); ++i)
      for (Index j = 0; j < x_hat.width(); ++j) {
        if (!mask(i, j)) continue;
        const Index p = x_hat.position(n, i, j);
        out.row(p).array() = x_hat.row(p).array() + r.row(p).array();
      }
  if (counts) {
    counts->first_layer_positions += x_hat.batch() * first_layer_set.count();
    counts->active_positions += x_hat.batch() * mask.count();
  }
  return out;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> perforated_residual_apply(const Tensor<Scalar>& x_hat, const ResidualUnitParams<Scalar>& unit,
                                         const ActiveMask& mask, PerforationCounts* counts) {
  if (unit.stride() != 1 || unit.projection)
    throw UnsupportedConfiguration("perforated_residual_apply: only stride-1 units without projection are supported");
  expect_axis("perforated_residual_apply", "mask_height", x_hat.height(), mask.rows());
  expect_axis("perforated_residual_apply", "mask_width", x_hat.width(), mask.cols());
  return detail::perforated_residual_apply(x_hat, unit, mask, dilate_mask(mask), counts);
}

template <typename Scalar>
Tensor<Scalar> classifier_head(const Tensor<Scalar>& features, const Tensor<Scalar>& weight,
                               const Tensor<Scalar>& bias) {
  return dense_layer(global_avg_pool(features), weight, bias);
}

#define SACT_INSTANTIATE_RESIDUAL(S)                                                                             \
  template Tensor<S> bn_relu_infer(const Tensor<S>&, const BatchNormLayer<S>&, const BatchNormConfig&);          \
  template struct ResidualUnitParams<S>;                                                                         \
  template Tensor<S> residual_unit_forward(const Tensor<S>&, const ResidualUnitParams<S>&);                      \
  template Tensor<S> perforated_residual_apply(const Tensor<S>&, const ResidualUnitParams<S>&, const ActiveMask&, \
                                               PerforationCounts*);                                             \
  template Tensor<S> detail::perforated_residual_apply(const Tensor<S>&, const ResidualUnitParams<S>&,           \
                                                       const ActiveMask&, const ActiveMask&, PerforationCounts*); \
  template Tensor<S> classifier_head(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

SACT_INSTANTIATE_RESIDUAL(float)
SACT_INSTANTIATE_RESIDUAL(double)

}  // namespace sact
