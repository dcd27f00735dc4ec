#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "probdrop/dropout.hpp"
#include "probdrop/stats.hpp"
#include "probdrop/tensor_io.hpp"
#include "probdrop/trainer.hpp"

namespace probdrop::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kVariantNames{"dropout", "dropblock", "batchdropblock", "probdropblock"};

Variant variant_from(const std::string& name) {
  auto v = parse_variant(name);
  if (!v) throw UsageError("unknown variant '" + name + "'");
  return *v;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(IoErrc::open_failed, "cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError(IoErrc::write_failed, "write to " + path.string() + " failed");
}

struct MaskArgs {
  std::string input;
  std::string out_dir;
  std::string variant = "probdropblock";
  double alpha = 0.2;
  std::size_t block_size = 4;
  std::uint64_t seed = 1;
};

struct StatsArgs {
  std::string variant = "probdropblock";
  double alpha = 0.2;
  std::size_t block_size = 4;
  std::vector<std::size_t> dims{1, 1, 16, 16};
  double fill = 1.0;
  std::string input;
  std::size_t trials = 20000;
  std::uint64_t seed = 1;
  unsigned threads = 0;
  bool inference = false;
  bool inject_fault = false;
  std::string out;
};

struct TrainArgs {
  std::string variant = "none";
  double alpha = 0.2;
  std::size_t block_size = 4;
  std::string schedule = "linear";
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double lr = 0.05;
  std::size_t n_train = 256;
  std::size_t n_val = 2048;
  std::uint64_t seed = 1;
  std::string out;
};

struct AblateArgs {
  TrainArgs train;
  std::string axis;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

void add_train_flags(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--alpha", a.alpha, "Target base drop probability")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--block-size", a.block_size, "Block side B")->check(CLI::Range(1, 16));
  sub->add_option("--schedule", a.schedule, "Alpha schedule")->check(CLI::IsMember({"linear", "constant"}));
  sub->add_option("--epochs", a.epochs)->check(CLI::Range(1, 100000));
  sub->add_option("--batch-size", a.batch_size)->check(CLI::Range(1, 100000));
  sub->add_option("--lr", a.lr, "SGD learning rate")->check(CLI::PositiveNumber);
  sub->add_option("--n-train", a.n_train)->check(CLI::Range(2, 1000000));
  sub->add_option("--n-val", a.n_val)->check(CLI::Range(2, 1000000));
}

toy::TrainConfig train_config(const TrainArgs& a) {
  toy::TrainConfig c;
  if (a.variant != "none") c.spec = DropSpec{variant_from(a.variant), a.alpha, a.block_size, Mode::Train};
  c.linear_schedule = a.schedule == "linear";
  c.epochs = a.epochs;
  c.batch_size = a.batch_size;
  c.learning_rate = a.lr;
  c.n_train = a.n_train;
  c.n_val = a.n_val;
  c.seed = a.seed;
  return c;
}

int cmd_mask(const MaskArgs& a, std::ostream& out) {
  const FeatureMap image = read_image_ppm(a.input);
  const DropSpec spec{variant_from(a.variant), a.alpha, a.block_size, Mode::Train};
  validate(spec, image.dims());
  const auto result = run_variant(image, spec, RngStream{a.seed, 0});

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  const std::size_t channels = image.dims().channel;
  // The composite shows which pixels survive; it is not rescaled.
  const FeatureMap composite = elementwise_mul(image, result.mask);
  write_image_ppm(composite, dir / (channels == 3 ? "masked.ppm" : "masked.pgm"));
  std::size_t dropped = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto tag = std::to_string(c);
    write_plane_pgm(composite.plane(0, c), dir / ("masked_c" + tag + ".pgm"));
    const auto m = result.mask.plane(0, c);
    write_mask_pgm(m, dir / ("mask_c" + tag + ".pgm"));
    dropped += m.size() - m.count_kept();
  }
  out << "variant=" << a.variant << " alpha=" << a.alpha << " block_size=" << a.block_size
      << " dropped_fraction=" << static_cast<double>(dropped) / static_cast<double>(image.dims().numel())
      << '\n';
  return kExitOk;
}

int cmd_stats(const StatsArgs& a, std::ostream& out, std::ostream& err) {
  FeatureMap input = [&] {
    if (!a.input.empty()) return read_tensor(a.input);
    if (a.dims.size() != 4) throw UsageError("--dims needs four comma-separated sizes (B,C,H,W)");
    return FeatureMap(Dims{a.dims[0], a.dims[1], a.dims[2], a.dims[3]}, a.fill);
  }();
  const DropSpec spec{variant_from(a.variant), a.alpha, a.block_size, a.inference ? Mode::Inference : Mode::Train};
  const auto report = estimate_drop_rates(input, spec, a.trials, a.seed, HarnessOptions{a.threads, a.inject_fault});
  write_text(a.out, to_json(report).dump(2) + "\n");

  out << "variant=" << a.variant << " trials=" << a.trials << " mean_drop_fraction=" << report.mean_drop_fraction
      << " channel_consistent_fraction=" << report.channel_consistent_fraction
      << " violations=" << report.violations << " failing_positions=" << report.failing_positions.size() << '\n';
  if (report.passed()) return kExitOk;

  err << "verification failed: " << report.violations << " contiguity violations, "
      << report.failing_positions.size() << " positions outside their band\n";
  const auto& d = report.dims;
  for (auto k : report.failing_positions) {
    const std::size_t j = k % d.width, i = (k / d.width) % d.height;
    const std::size_t c = (k / d.plane_size()) % d.channel, b = k / (d.plane_size() * d.channel);
    err << "  (" << b << "," << c << "," << i << "," << j << ") rate " << report.rates[k] << " expected "
        << report.expected_rates[k] << " +- " << report.ci_half_widths[k] << '\n';
  }
  return kExitVerify;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto metrics = toy::train(train_config(a));
  toy::write_metrics_csv(metrics, a.out);
  const auto& last = metrics.epochs.back();
  out << std::fixed << std::setprecision(6) << "train_acc=" << last.train_acc << " val_acc=" << last.val_acc
      << " gap=" << metrics.final_gap() << '\n';
  return kExitOk;
}

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  if (a.train.variant == "none") throw UsageError("ablate needs a dropout variant");
  const SweepAxis axis = a.axis == "alpha" ? SweepAxis::Alpha : SweepAxis::BlockSize;
  for (double v : a.values) {
    if (axis == SweepAxis::BlockSize && (v < 1.0 || v != std::floor(v))) {
      throw UsageError("block sizes must be positive integers");
    }
  }
  const auto base = train_config(a.train);
  auto metric = [&](double v, std::uint64_t seed) {
    auto c = base;
    c.seed = seed;
    if (axis == SweepAxis::Alpha) {
      c.spec->alpha = v;
    } else {
      c.spec->block_size = static_cast<std::size_t>(v);
    }
    return toy::train(c).epochs.back().val_acc;
  };
  const auto result = sweep(axis, a.values, metric, a.seeds);
  write_text(a.train.out, to_json(result).dump(2) + "\n");
  for (const auto& p : result.points) {
    out << to_string(axis) << '=' << p.value << " mean=" << p.mean << " sd=" << p.sd
        << " failures=" << p.failures.size() << '\n';
  }
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured dropout masks, Monte-Carlo checks and toy training"};
  app.name("probdrop");
  app.require_subcommand(1);

  MaskArgs mask;
  auto* m = app.add_subcommand("mask", "Apply a dropout variant to a PPM/PGM image and write the masks");
  m->add_option("--input", mask.input, "Input image (P5 or P6)")->required();
  m->add_option("--out-dir", mask.out_dir, "Directory for the output images")->required();
  m->add_option("--variant", mask.variant)->check(CLI::IsMember(kVariantNames));
  m->add_option("--alpha", mask.alpha)->check(CLI::Range(0.0, 1.0));
  m->add_option("--block-size", mask.block_size)->check(CLI::Range(1, 1 << 20));
  m->add_option("--seed", mask.seed);

  StatsArgs stats;
  auto* s = app.add_subcommand("stats", "Monte-Carlo drop-rate, consistency and contiguity report");
  s->add_option("--variant", stats.variant)->check(CLI::IsMember(kVariantNames));
  s->add_option("--alpha", stats.alpha)->check(CLI::Range(0.0, 1.0));
  s->add_option("--block-size", stats.block_size)->check(CLI::Range(1, 1 << 20));
  s->add_option("--dims", stats.dims, "B,C,H,W of a constant input")->delimiter(',')->expected(4);
  s->add_option("--fill", stats.fill, "Value of the constant input");
  s->add_option("--input", stats.input, "TensorFile input instead of a constant map");
  s->add_option("--trials", stats.trials)->check(CLI::Range(std::size_t{1}, std::size_t{100000000}));
  s->add_option("--seed", stats.seed);
  s->add_option("--threads", stats.threads, "Worker threads, 0 = all cores");
  s->add_flag("--inference", stats.inference, "Run the variant in inference mode");
  s->add_flag("--inject-fault", stats.inject_fault)->group("");
  s->add_option("--out", stats.out, "JSON report path")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the toy network and write per-epoch metrics");
  t->add_option("--variant", train.variant)->check(CLI::IsMember(
      {"none", "dropout", "dropblock", "batchdropblock", "probdropblock"}));
  add_train_flags(t, train);
  t->add_option("--seed", train.seed);
  t->add_option("--out", train.out, "CSV path")->required();

  AblateArgs ablate;
  ablate.train.variant = "probdropblock";
  auto* a = app.add_subcommand("ablate", "Sweep alpha or the block size over several seeds");
  a->add_option("--axis", ablate.axis)->required()->check(CLI::IsMember({"alpha", "block"}));
  a->add_option("--values", ablate.values)->required()->delimiter(',');
  a->add_option("--seeds", ablate.seeds)->delimiter(',');
  a->add_option("--variant", ablate.train.variant)->check(CLI::IsMember(kVariantNames));
  add_train_flags(a, ablate.train);
  a->add_option("--out", ablate.train.out, "JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\nrun with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (*m) return cmd_mask(mask, out);
    if (*s) return cmd_stats(stats, out, err);
    if (*t) return cmd_train(train, out);
    if (ablate.values.empty() || ablate.seeds.empty()) throw UsageError("--values and --seeds must be nonempty");
    for (std::size_t k = 1; k < ablate.values.size(); ++k) {
      if (!(ablate.values[k] > ablate.values[k - 1])) throw UsageError("--values must be strictly increasing");
    }
    return cmd_ablate(ablate, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    // Preconditions the parser cannot see, such as a block larger than the map.
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace probdrop::cli
