#include "sact/cli.hpp"

#include "sact/flops.hpp"
#include "sact/gradcheck.hpp"
#include "sact/io.hpp"
#include "sact/saliency.hpp"
#include "sact/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

namespace sact {
namespace {

// Re-raises any failure with the flag and path that caused it.
template <typename F>
auto from_flag(const std::string& flag, const std::string& path, F&& load) {
  try {
    return load();
  } catch (const std::exception& e) {
    throw std::runtime_error(flag + " '" + path + "': " + e.what());
  }
}

struct Overrides {
  std::optional<double> tau;
  std::optional<double> epsilon;
  std::optional<Index> tile;

  void apply(NetworkSpec& spec) const {
    if (tau) spec.tau = *tau;
    if (epsilon) spec.epsilon = *epsilon;
    if (tile) spec.tile = *tile;
    spec.validate();
  }
};

struct Flags {
  std::string arch, data, checkpoint, out, fixations, precision = "single", image;
  std::vector<std::string> maps, fixation_files;
  std::vector<double> blur_s{10.0}, gamma{0.005};
  Overrides over;
  std::uint64_t seed = 0;
  Index resolution = 0;
  Index epochs = 10;
  Index count = 100;
  Index classes = 4;
  Index index = 0;
};

NetworkSpec arch_of(const Flags& f) {
  NetworkSpec spec = from_flag("--arch", f.arch, [&] { return load_config(f.arch); });
  f.over.apply(spec);
  return spec;
}

template <typename S>
NetworkParams<S> load_network(const Flags& f) {
  const NetworkSpec spec = arch_of(f);
  const Checkpoint ckpt = from_flag("--checkpoint", f.checkpoint, [&] { return load_checkpoint(f.checkpoint); });
  NetworkParams<S> params = NetworkParams<S>::zeros(spec);
  from_flag("--checkpoint", f.checkpoint, [&] { return load_into(params, ckpt, /*strict=*/true); });
  return params;
}

Dataset data_of(const std::string& flag, const std::string& path) {
  return from_flag(flag, path, [&] { return load_dataset(path); });
}

void join(std::ostream& os, std::string_view label, const std::vector<double>& values) {
  os << label;
  for (double v : values) os << '\t' << v;
  os << '\n';
}

template <typename S>
int cmd_train(const Flags& f, std::ostream& out) {
  NetworkSpec spec = arch_of(f);
  const Dataset data = data_of("--data", f.data);
  TrainConfig cfg;
  cfg.tau = spec.tau;
  cfg.epsilon = spec.epsilon;
  cfg.seed = f.seed;
  cfg.epochs = f.epochs;
  cfg.precision = parse_precision(f.precision);

  NetworkParams<S> init =
      f.checkpoint.empty()
          ? initialize_network<S>(spec, f.seed)
          : from_flag("--checkpoint", f.checkpoint,
                      [&] { return initialize_two_stage<S>(spec, load_checkpoint(f.checkpoint), f.seed); });

  const std::string log_path = f.out + ".log";
  std::ostringstream log;
  auto save = [&](const NetworkParams<S>& p) {
    from_flag("--out", f.out, [&] {
      save_checkpoint(f.out, make_checkpoint(p));
      return 0;
    });
    std::ofstream lf(log_path, std::ios::binary);
    if (!lf) throw std::runtime_error("--out '" + log_path + "': cannot write training log");
    lf << log.str();
  };
  const TrainResult<S> result = train<S>(std::move(init), data, cfg, &log, save);
  save(result.params);
  out << log.str();
  for (const auto& rec : result.epochs) out << "dead-units\t" << format_dead_units(rec) << '\n';
  out << "checkpoint\t" << f.out << "\nlog\t" << log_path << '\n';
  return 0;
}

template <typename S>
int cmd_eval(const Flags& f, std::ostream& out) {
  const NetworkParams<S> params = load_network<S>(f);
  const Dataset data = data_of("--data", f.data);
  const EvalSummary s = evaluate(params, data);
  out << "examples\t" << s.count << '\n' << "accuracy\t" << s.accuracy << '\n';
  join(out, "units", s.units);
  join(out, "ponder", s.ponder);
  out << "flops\t" << s.flops << '\n';
  return 0;
}

int cmd_flops(const Flags& f, std::ostream& out) {
  const NetworkSpec spec = arch_of(f);
  const Index res = f.resolution > 0 ? f.resolution : 224;
  const FlopsBreakdown b = count_flops(spec, res);
  out << "resolution\t" << res << '\n' << "stem\t" << b.stem << '\n';
  for (std::size_t k = 0; k < b.blocks.size(); ++k) out << "block" << k + 1 << '\t' << b.blocks[k].total() << '\n';
  out << "head\t" << b.head << '\n' << "aux\t" << b.aux() << '\n';
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4e", static_cast<double>(b.total()));
  out << "total\t" << b.total() << '\t' << buf << '\n';
  return 0;
}

template <typename S>
int cmd_ponder_map(const Flags& f, std::ostream& out) {
  const NetworkParams<S> params = load_network<S>(f);
  if (params.spec.halting != HaltingMode::sact)
    throw std::runtime_error("--arch '" + f.arch + "': ponder-map needs a network with halting=sact");
  Tensor<S> image;
  if (!f.image.empty()) {
    const Field<double> px = from_flag("--image", f.image, [&] { return read_pgm(f.image); });
    const double peak = std::max(px.maxCoeff(), 1.0);
    image = Tensor<S>(Shape{1, px.rows(), px.cols(), params.spec.input_channels});
    for (Index i = 0; i < px.rows(); ++i)
      for (Index j = 0; j < px.cols(); ++j)
        for (Index c = 0; c < image.channels(); ++c) image(0, i, j, c) = static_cast<S>(px(i, j) / peak);
  } else {
    const Dataset data = data_of("--data", f.data);
    if (f.index < 0 || f.index >= data.size())
      throw std::runtime_error("--index " + std::to_string(f.index) + ": outside the " + std::to_string(data.size()) +
                               " images of '" + f.data + "'");
    const Index idx[] = {f.index};
    image = data.images<S>(idx);
  }
  const auto result = network_forward(params, image);
  std::vector<Field<double>> maps;
  for (std::size_t k = 0; k < result.maps.size(); ++k) {
    maps.push_back(result.maps[k][0].values.template cast<double>());
    const std::string base = f.out + ".block" + std::to_string(k + 1);
    write_pgm(base + ".pgm", maps.back());
    write_csv(base + ".csv", maps.back());
    out << "block" << k + 1 << '\t' << maps.back().rows() << 'x' << maps.back().cols() << "\tmean "
        << static_cast<double>(result.ponder[k][0]) << '\n';
  }
  const Field<double> total = total_ponder_map(maps);
  write_pgm(f.out + ".total.pgm", total);
  write_csv(f.out + ".total.csv", total);
  out << "total\t" << total.rows() << 'x' << total.cols() << '\t' << f.out << ".total.csv\n";
  return 0;
}

int cmd_saliency(const Flags& f, std::ostream& out) {
  if (f.maps.size() != f.fixation_files.size())
    throw std::runtime_error("--map and --fixations must be given the same number of times (" +
                             std::to_string(f.maps.size()) + " vs " + std::to_string(f.fixation_files.size()) + ")");
  std::vector<Field<double>> maps;
  std::vector<std::vector<Fixation>> fixations;
  for (std::size_t i = 0; i < f.maps.size(); ++i) {
    Field<double> m = from_flag("--map", f.maps[i], [&] { return read_csv(f.maps[i]); });
    if (f.resolution > 0) m = upsample_nearest(m, f.resolution, f.resolution);
    maps.push_back(std::move(m));
    fixations.push_back(from_flag("--fixations", f.fixation_files[i], [&] { return read_fixations(f.fixation_files[i]); }));
  }
  const auto grid = saliency_grid_search(maps, fixations, f.blur_s, f.gamma);
  const GridPoint* best = &grid.front();
  for (const auto& g : grid) {
    out << "s\t" << g.blur_s << "\tgamma\t" << g.gamma << "\tauc\t" << g.auc << '\n';
    if (g.auc > best->auc) best = &g;
  }
  out << "best\ts\t" << best->blur_s << "\tgamma\t" << best->gamma << "\tauc\t" << best->auc << '\n';
  return 0;
}

int cmd_gradcheck(const Flags& f, std::ostream& out) {
  if (parse_precision(f.precision) != Precision::float64)
    throw std::runtime_error("--precision " + f.precision + ": gradcheck runs in double precision only");
  NetworkSpec spec = f.arch.empty() ? toy_spec(HaltingMode::sact) : arch_of(f);
  if (f.arch.empty()) f.over.apply(spec);
  NetworkGradCheck cfg;
  cfg.tau = spec.tau;
  const GradReport report = check_network_gradients(spec, f.seed, cfg);
  out << report.format();
  return report.passed() ? 0 : 1;
}

int cmd_make_data(const Flags& f, std::ostream& out) {
  SyntheticConfig cfg;
  cfg.seed = f.seed;
  cfg.count = f.count;
  cfg.classes = f.classes;
  if (f.resolution > 0) cfg.height = cfg.width = f.resolution;
  const SyntheticData d = generate_synthetic_dataset(cfg);
  from_flag("--out", f.out, [&] {
    save_dataset(f.out, d.data);
    save_masks(masks_path(f.out), d.masks);
    return 0;
  });
  out << "dataset\t" << f.out << "\nmasks\t" << masks_path(f.out) << "\nimages\t" << d.data.size() << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adaptive computation time for residual networks", "sact"};
  app.require_subcommand(1);
  Flags f;

  auto arch = [&](CLI::App* c, bool required) {
    auto* o = c->add_option("--arch", f.arch, "architecture config file");
    if (required) o->required();
  };
  auto spec_overrides = [&](CLI::App* c) {
    c->add_option("--tau", f.over.tau, "ponder cost weight");
    c->add_option("--epsilon", f.over.epsilon, "halting threshold slack");
    c->add_option("--tile", f.over.tile, "SACT halting tile size");
  };
  auto precision = [&](CLI::App* c) {
    c->add_option("--precision", f.precision, "single or double")->check(CLI::IsMember({"single", "double"}));
  };

  auto* train = app.add_subcommand("train", "train a network, writing a checkpoint and a metrics log");
  arch(train, true);
  train->add_option("--data", f.data, "training dataset")->required();
  train->add_option("--out", f.out, "checkpoint path (log goes to <out>.log)")->required();
  train->add_option("--checkpoint", f.checkpoint, "backbone checkpoint for two-stage initialization");
  train->add_option("--seed", f.seed);
  train->add_option("--epochs", f.epochs);
  spec_overrides(train);
  precision(train);

  auto* eval = app.add_subcommand("eval", "accuracy, units per block and adaptive FLOPs");
  arch(eval, true);
  eval->add_option("--checkpoint", f.checkpoint)->required();
  eval->add_option("--data", f.data)->required();
  spec_overrides(eval);
  precision(eval);

  auto* flops = app.add_subcommand("flops", "convolution FLOPs of an architecture");
  arch(flops, true);
  flops->add_option("--resolution", f.resolution, "input side length (default 224)");

  auto* pmap = app.add_subcommand("ponder-map", "per-block and total ponder cost maps for one image");
  arch(pmap, true);
  pmap->add_option("--checkpoint", f.checkpoint)->required();
  pmap->add_option("--out", f.out, "output prefix")->required();
  auto* pdata = pmap->add_option("--data", f.data, "dataset holding the image");
  auto* pimage = pmap->add_option("--image", f.image, "P5 PGM image instead of --data");
  pdata->excludes(pimage);
  pmap->add_option("--index", f.index, "image index within --data");
  spec_overrides(pmap);
  precision(pmap);

  auto* sal = app.add_subcommand("saliency-eval", "postprocess ponder maps and score AUC-Judd");
  sal->add_option("--map", f.maps, "raw ponder map CSV (repeatable)")->required();
  sal->add_option("--fixations", f.fixation_files, "fixation CSV, one per --map")->required();
  sal->add_option("--blur-s", f.blur_s, "blur s, comma-separated list for a grid")->delimiter(',');
  sal->add_option("--gamma", f.gamma, "center weight, comma-separated list for a grid")->delimiter(',');
  sal->add_option("--resolution", f.resolution, "upsample maps to this side length first");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the training objective");
  arch(grad, false);
  grad->add_option("--seed", f.seed);
  spec_overrides(grad);
  precision(grad);

  auto* make = app.add_subcommand("make-data", "generate the synthetic patch dataset");
  make->add_option("--out", f.out)->required();
  make->add_option("--seed", f.seed);
  make->add_option("--count", f.count);
  make->add_option("--classes", f.classes);
  make->add_option("--resolution", f.resolution, "image side length (default 32)");

  if (!args.empty() && !args.front().starts_with("-") && app.get_subcommand_no_throw(args.front()) == nullptr) {
    err << "error: unknown command '" << args.front() << "'\n" << app.help();
    return 2;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (app.get_subcommands().empty()) err << app.help();
    return 2;
  }

  const bool dbl = f.precision == "double";
  try {
    if (train->parsed()) return dbl ? cmd_train<double>(f, out) : cmd_train<float>(f, out);
    if (eval->parsed()) return dbl ? cmd_eval<double>(f, out) : cmd_eval<float>(f, out);
    if (flops->parsed()) return cmd_flops(f, out);
    if (pmap->parsed()) {
      if (f.data.empty() && f.image.empty()) throw std::runtime_error("ponder-map: one of --data or --image is required");
      return dbl ? cmd_ponder_map<double>(f, out) : cmd_ponder_map<float>(f, out);
    }
    if (sal->parsed()) return cmd_saliency(f, out);
    if (grad->parsed()) return cmd_gradcheck(f, out);
    if (make->parsed()) return cmd_make_data(f, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace sact
