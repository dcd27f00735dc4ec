// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cli.hpp"
#include "gradcheck.hpp"
#include "probdrop/dropout.hpp"
#include "probdrop/stats.hpp"
#include "probdrop/tensor_io.hpp"
#include "probdrop/trainer.hpp"
#include "test_support.hpp"

using namespace probdrop;
using probdrop::test::binomial_band;
using probdrop::test::random_map;
using probdrop::test::TempDir;

namespace {

const std::vector<Variant> kAll{Variant::Dropout, Variant::DropBlock, Variant::BatchDropBlock,
                                Variant::ProbDropBlock};
const std::vector<Variant> kBlock{Variant::DropBlock, Variant::BatchDropBlock, Variant::ProbDropBlock};

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

int cli(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "probdrop");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  return code;
}

// 1 -------------------------------------------------------------------------
Outcome unit_block_exactness() {
  const FeatureMap input(Dims{1, 1, 16, 16}, 1.0);
  const std::size_t trials = 20000;
  const auto r = estimate_drop_rates(input, DropSpec{Variant::ProbDropBlock, 0.2, 1, Mode::Train}, trials, 1);
  const double band = binomial_band(0.2, trials);
  double worst = 0.0;
  for (double x : r.rates) worst = std::max(worst, std::abs(x - 0.2));
  return {worst <= band && r.violations == 0,
          "max |rate - 0.2| = " + fmt("%.5f", worst) + ", band " + fmt("%.5f", band)};
}

// 2 -------------------------------------------------------------------------
Outcome saliency_weighting() {
  const std::size_t side = 16, n = side * side;
  const double v = 0.3;
  // gamma = x / mean|a| = 5 for x = 5 (N-1) v / (N-5).
  const double x = 5.0 * (n - 1) * v / (n - 5);
  std::vector<double> data(n, v);
  const std::size_t spike = 7 * side + 9;
  data[spike] = x;
  const FeatureMap input(Dims{1, 1, side, side}, data);
  const double alpha = 0.15;
  const double q_spike = std::min(alpha * 5.0, 1.0);
  const double q_base = alpha * static_cast<double>(n - 5) / static_cast<double>(n - 1);

  const std::size_t trials = 20000;
  const auto r = estimate_drop_rates(input, DropSpec{Variant::ProbDropBlock, alpha, 1, Mode::Train}, trials, 11);
  bool pass = std::abs(r.rates[spike] - q_spike) <= binomial_band(q_spike, trials);
  double worst = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == spike) continue;
    const double z = std::abs(r.rates[k] - q_base) / (binomial_band(q_base, trials) / kBandSigmas);
    worst = std::max(worst, z);
  }
  pass = pass && worst <= kBandSigmas;
  return {pass, "spike rate " + fmt("%.4f", r.rates[spike]) + " vs 0.75, baseline worst " + fmt("%.2f", worst) +
                    " SE from " + fmt("%.5f", q_base)};
}

// 3 -------------------------------------------------------------------------
Outcome block_geometry() {
  bool pass = true;
  for (std::size_t b = 1; b <= 10; ++b) {
    const double half = (static_cast<double>(b) - 1.0) / 2.0;
    const auto expect_lower = static_cast<std::size_t>(std::floor(half));
    const auto expect_upper = static_cast<std::size_t>(std::floor(half + 0.5));
    const auto got = block_bounds(b);
    pass = pass && got.lower == expect_lower && got.upper == expect_upper;
  }
  pass = pass && block_bounds(4) == BlockBounds{1, 2};

  std::mt19937_64 gen(3);
  std::uniform_int_distribution<std::size_t> side(4, 20), block(1, 8);
  std::uniform_real_distribution<double> alpha(0.0, 0.6);
  std::size_t violations = 0, masks = 0;
  for (auto v : kAll) {
    for (int k = 0; k < 1000; ++k) {
      const Dims d{1, 2, side(gen), side(gen)};
      const std::size_t b = v == Variant::Dropout ? 1 : std::min({block(gen), d.height, d.width});
      const DropSpec spec{v, alpha(gen), b, Mode::Train};
      const auto res = run_variant(random_map(gen, d), spec, RngStream{static_cast<std::uint64_t>(k), 7});
      for (std::size_t c = 0; c < d.channel; ++c) violations += check_contiguity(res.mask.plane(0, c), res.seeds[c], b);
      ++masks;
    }
  }
  pass = pass && violations == 0;
  return {pass, "bounds for B=1..10 match, " + std::to_string(violations) + " violations over " +
                    std::to_string(masks) + " masks (2 channels each)"};
}

// 4 -------------------------------------------------------------------------
Outcome channel_consistency() {
  std::mt19937_64 gen(4);
  const auto three = random_map(gen, Dims{1, 3, 16, 16}, 0.0, 1.0);
  const auto bdb = estimate_drop_rates(three, DropSpec{Variant::BatchDropBlock, 0.2, 4, Mode::Train}, 1000, 40);
  const auto same_bdb = static_cast<std::size_t>(std::lround(bdb.channel_consistent_fraction * 1000));
  bool pass = same_bdb == 1000;
  std::string detail = "batchdropblock identical " + std::to_string(same_bdb) + "/1000";

  const auto eight = random_map(gen, Dims{1, 8, 16, 16}, 0.0, 1.0);
  for (auto v : {Variant::DropBlock, Variant::ProbDropBlock}) {
    const auto r = estimate_drop_rates(eight, DropSpec{v, 0.2, 4, Mode::Train}, 1000, 41);
    const auto differ = 1000 - static_cast<std::size_t>(std::lround(r.channel_consistent_fraction * 1000));
    pass = pass && differ >= 990;
    detail += ", " + std::string(to_string(v)) + " differing " + std::to_string(differ) + "/1000";
  }
  return {pass, detail};
}

// 5 -------------------------------------------------------------------------
Outcome normalization() {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> alpha(0.01, 0.5), value(-3.0, 3.0);
  double worst = 0.0;
  std::size_t checked = 0;
  bool pass = true;
  for (auto v : kBlock) {
    for (int k = 0; k < 300; ++k) {
      const FeatureMap input(Dims{2, 3, 12, 12}, value(gen));
      const auto res = run_variant(input, DropSpec{v, alpha(gen), static_cast<std::size_t>(1 + k % 5), Mode::Train},
                                   RngStream{static_cast<std::uint64_t>(k), 5});
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t c = 0; c < 3; ++c) {
          const auto m = res.mask.plane(b, c);
          if (m.count_kept() == 0) continue;
          double in = 0.0, out = 0.0;
          for (double x : input.plane_view(b, c)) in += x;
          for (double x : res.output.plane_view(b, c)) out += x;
          worst = std::max(worst, std::abs(out - in) / std::abs(in));
          ++checked;
        }
      }
    }
  }
  pass = worst <= 1e-9;

  // alpha = 1 on a constant map seeds every cell: nothing is kept.
  std::size_t zero_maps = 0;
  for (auto v : kBlock) {
    const FeatureMap input(Dims{1, 2, 8, 8}, 2.5);
    const auto res = run_variant(input, DropSpec{v, 1.0, 2, Mode::Train}, RngStream{1, 0});
    bool all_zero = true;
    for (double x : res.output.data()) all_zero = all_zero && x == 0.0;
    zero_maps += all_zero && res.mask.count_kept() == 0;
  }
  pass = pass && zero_maps == kBlock.size();
  return {pass, "max relative sum error " + fmt("%.2e", worst) + " over " + std::to_string(checked) +
                    " slices, kept=0 gives zero map for " + std::to_string(zero_maps) + "/3 variants"};
}

// 6 -------------------------------------------------------------------------
Outcome schedule() {
  bool pass = true;
  double worst_mid = 0.0;
  for (double target : {0.05, 0.1, 0.2, 0.3, 0.7, 1.0}) {
    for (std::uint64_t t : {2, 10, 1000, 123456}) {
      pass = pass && alpha_at(ScheduleState{target, t, 0}) == 0.0;
      pass = pass && alpha_at(ScheduleState{target, t, t}) == target;
      const double mid = alpha_at(ScheduleState{target, t, t / 2});
      worst_mid = std::max(worst_mid, std::abs(mid - target / 2.0) / target);
    }
  }
  pass = pass && worst_mid <= std::numeric_limits<double>::epsilon();

  std::mt19937_64 gen(6);
  const auto input = random_map(gen, Dims{2, 3, 12, 12});
  std::size_t identities = 0;
  for (auto v : kAll) {
    const auto res = apply(input, DropSpec{v, 0.2, 4, Mode::Train}, ScheduleState{0.2, 500, 0}, RngStream{9, 9});
    identities += same_bits(res.output.data(), input.data()) && res.mask.all_ones();
  }
  pass = pass && identities == kAll.size();
  return {pass, "endpoints exact, midpoint error " + fmt("%.1e", worst_mid) + " (relative), alpha=0 identity for " +
                    std::to_string(identities) + "/4 variants"};
}

// 7 -------------------------------------------------------------------------
Outcome inference_passthrough() {
  std::mt19937_64 gen(7);
  std::size_t exact = 0, total = 0;
  for (auto v : kAll) {
    for (int k = 0; k < 20; ++k) {
      const auto input = random_map(gen, Dims{2, 3, 10, 10});
      const auto res = run_variant(input, DropSpec{v, 0.5, 3, Mode::Inference}, RngStream{1, 2});
      exact += same_bits(res.output.data(), input.data()) && res.mask.all_ones();
      ++total;
    }
  }
  return {exact == total, std::to_string(exact) + "/" + std::to_string(total) + " outputs bit-identical"};
}

// 8 -------------------------------------------------------------------------
Outcome gradient_check() {
  const auto r = test::gradient_check(10, 1e-4, Variant::ProbDropBlock, 8);
  return {r.points_used == 10 && r.max_rel_error < 1e-4,
          std::to_string(r.points_used) + " points (" + std::to_string(r.points_tried - r.points_used) +
              " skipped at rectifier kinks), " + std::to_string(r.parameters_checked) +
              " parameters, max relative error " + fmt("%.2e", r.max_rel_error)};
}

// 9 -------------------------------------------------------------------------
Outcome regularization() {
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  auto run = [](std::optional<DropSpec> spec, std::uint64_t seed) {
    toy::TrainConfig c;
    c.spec = spec;
    c.seed = seed;
    c.n_train = 256;
    return toy::train(c);
  };
  std::vector<std::future<toy::Metrics>> base, pdb;
  const auto policy = std::thread::hardware_concurrency() > 1 ? std::launch::async : std::launch::deferred;
  for (auto s : seeds) {
    base.push_back(std::async(policy, run, std::nullopt, s));
    pdb.push_back(std::async(policy, run, DropSpec{Variant::ProbDropBlock, 0.2, 4, Mode::Train}, s));
  }
  double gap_b = 0, gap_p = 0, val_b = 0, val_p = 0, tr_b = 0, tr_p = 0;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const auto mb = base[k].get();
    const auto mp = pdb[k].get();
    gap_b += mb.final_gap();
    gap_p += mp.final_gap();
    val_b += mb.epochs.back().val_acc;
    val_p += mp.epochs.back().val_acc;
    tr_b += mb.epochs.back().train_acc;
    tr_p += mp.epochs.back().train_acc;
  }
  const double n = static_cast<double>(seeds.size());
  gap_b /= n, gap_p /= n, val_b /= n, val_p /= n, tr_b /= n, tr_p /= n;
  return {gap_p < gap_b && val_p >= val_b - 0.01,
          "baseline train " + fmt("%.4f", tr_b) + " val " + fmt("%.4f", val_b) + " gap " + fmt("%.4f", gap_b) +
              "; probdropblock train " + fmt("%.4f", tr_p) + " val " + fmt("%.4f", val_p) + " gap " +
              fmt("%.4f", gap_p)};
}

// 10 ------------------------------------------------------------------------
/// 48x48 RGB scene: dim textured background, one bright disc, one mid square.
FeatureMap scene_image() {
  const std::size_t side = 48;
  std::vector<double> v(3 * side * side);
  std::mt19937_64 gen(10);
  std::uniform_real_distribution<double> noise(0.0, 0.08);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < side; ++i) {
      for (std::size_t j = 0; j < side; ++j) {
        const double di = i - 16.0, dj = j - 30.0;
        double p = 0.05 + noise(gen);
        if (di * di + dj * dj < 64.0) p = 0.85 + 0.05 * c;
        if (i >= 30 && i < 40 && j >= 6 && j < 18) p = 0.45 + 0.1 * c;
        v[(c * side + i) * side + j] = std::round(p * 255.0) / 255.0;
      }
    }
  }
  return FeatureMap(Dims{1, 3, side, side}, std::move(v));
}

Outcome mask_visualization() {
  TempDir dir("visualization");
  const auto image_path = dir / "scene.ppm";
  write_image_ppm(scene_image(), image_path);
  const FeatureMap image = read_image_ppm(image_path);
  const double p = 0.5;

  std::size_t ok_a = 0, ok_b = 0, ok_c = 0;
  double worst_frac = 0.0, min_ratio = std::numeric_limits<double>::infinity();
  for (int seed = 1; seed <= 100; ++seed) {
    const auto s = std::to_string(seed);
    const auto out_a = dir / ("dropout_" + s), out_b = dir / ("bdb_" + s), out_c = dir / ("pdb_" + s);
    const bool ran = cli({"mask", "--input", image_path.string(), "--variant", "dropout", "--alpha", "0.5",
                          "--seed", s, "--out-dir", out_a.string()}) == 0 &&
                     cli({"mask", "--input", image_path.string(), "--variant", "batchdropblock", "--seed", s,
                          "--out-dir", out_b.string()}) == 0 &&
                     cli({"mask", "--input", image_path.string(), "--variant", "probdropblock", "--seed", s,
                          "--out-dir", out_c.string()}) == 0;
    if (!ran) continue;

    std::size_t zeros = 0, total = 0;
    for (int c = 0; c < 3; ++c) {
      const auto m = read_image_ppm(out_a / ("mask_c" + std::to_string(c) + ".pgm"));
      for (double x : m.data()) zeros += x == 0.0;
      total += m.dims().numel();
    }
    const double frac = static_cast<double>(zeros) / static_cast<double>(total);
    worst_frac = std::max(worst_frac, std::abs(frac - p));
    const auto a0 = slurp(out_a / "mask_c0.pgm");
    ok_a += std::abs(frac - p) <= 0.02 && a0 != slurp(out_a / "mask_c1.pgm") && a0 != slurp(out_a / "mask_c2.pgm");

    const auto b0 = slurp(out_b / "mask_c0.pgm");
    ok_b += b0 == slurp(out_b / "mask_c1.pgm") && b0 == slurp(out_b / "mask_c2.pgm");

    double dropped = 0.0, kept = 0.0;
    std::size_t nd = 0, nk = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const auto m = read_image_ppm(out_c / ("mask_c" + std::to_string(c) + ".pgm"));
      auto px = image.plane_view(0, c);
      for (std::size_t k = 0; k < px.size(); ++k) {
        if (m.data()[k] == 0.0) {
          dropped += std::abs(px[k]);
          ++nd;
        } else {
          kept += std::abs(px[k]);
          ++nk;
        }
      }
    }
    if (nd > 0 && nk > 0) {
      const double ratio = (dropped / nd) / (kept / nk);
      min_ratio = std::min(min_ratio, ratio);
      ok_c += ratio > 1.0;
    }
  }
  return {ok_a == 100 && ok_b == 100 && ok_c == 100,
          "dropout " + std::to_string(ok_a) + "/100 (worst |zero fraction - 0.5| " + fmt("%.4f", worst_frac) +
              "), batchdropblock identical " + std::to_string(ok_b) + "/100, probdropblock dropped>kept " +
              std::to_string(ok_c) + "/100 (min ratio " + fmt("%.2f", min_ratio) + ")"};
}

// 11 ------------------------------------------------------------------------
std::string tree_bytes(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.filename().string() + '\n' + slurp(f);
  return all;
}

Outcome determinism() {
  TempDir dir("determinism");
  const auto image = dir / "scene.ppm";
  write_image_ppm(scene_image(), image);
  const auto tensor = dir / "input.fmap";
  std::mt19937_64 gen(11);
  write_tensor(random_map(gen, Dims{2, 3, 12, 12}, 0.0, 1.0), tensor);

  auto twice = [&](const std::string& name, const std::vector<std::vector<std::string>>& runs) {
    std::vector<std::string> outputs;
    for (std::size_t k = 0; k < runs.size(); ++k) {
      const auto out = dir / (name + std::to_string(k));
      std::filesystem::create_directories(out);
      auto args = runs[k];
      for (auto& a : args) {
        if (a.starts_with("@")) a = out.string() + a.substr(1);
      }
      std::string stdout_text;
      // Exit status 2 (a band miss) is still a deterministic outcome.
      const int code = cli(args, &stdout_text);
      if (code != 0 && code != 2) return false;
      outputs.push_back(std::to_string(code) + '\n' + stdout_text + tree_bytes(out));
    }
    return std::all_of(outputs.begin(), outputs.end(), [&](const auto& o) { return o == outputs.front(); });
  };

  std::vector<std::string> passed;
  std::vector<std::string> failed;
  auto record = [&](const std::string& what, bool ok) { (ok ? passed : failed).push_back(what); };

  for (const char* v : {"dropout", "dropblock", "batchdropblock", "probdropblock"}) {
    const std::vector<std::string> mask{"mask", "--input", image.string(), "--variant", v, "--seed", "5", "--out-dir", "@"};
    record(std::string("mask/") + v, twice(std::string("mask_") + v, {mask, mask}));
  }
  auto stats = [&](const char* threads) {
    return std::vector<std::string>{"stats", "--input", tensor.string(), "--block-size", "3", "--trials", "3000",
                                    "--seed", "9", "--threads", threads, "--out", "@/report.json"};
  };
  const auto hw = std::to_string(std::max(2u, std::thread::hardware_concurrency()));
  record("stats (1, 4 and " + hw + " threads)",
         twice("stats", {stats("1"), stats("4"), stats(hw.c_str()), stats("4")}));
  const std::vector<std::string> train{"train",   "--variant", "probdropblock", "--epochs", "3",  "--n-train",
                                       "64",      "--n-val",   "64",            "--seed",   "3",  "--out",
                                       "@/m.csv"};
  record("train", twice("train", {train, train}));
  const std::vector<std::string> ablate{"ablate",  "--axis",  "block", "--values",     "2,4", "--seeds", "1,2",
                                        "--epochs", "2",      "--n-train", "32", "--n-val", "32", "--out",
                                        "@/s.json"};
  record("ablate", twice("ablate", {ablate, ablate}));

  std::string detail = std::to_string(passed.size()) + "/" + std::to_string(passed.size() + failed.size()) +
                       " subcommand runs byte-identical";
  for (const auto& f : failed) detail += ", differs: " + f;
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments select criteria by number, e.g. `acceptance 1 9`.
  std::vector<std::size_t> only;
  for (int k = 1; k < argc; ++k) only.push_back(std::stoul(argv[k]));

  struct Criterion {
    const char* name;
    double limit_s;  // 0 = no runtime bound
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"unit-block exactness", 60, unit_block_exactness},
      {"saliency weighting", 0, saliency_weighting},
      {"block geometry", 0, block_geometry},
      {"channel consistency", 0, channel_consistency},
      {"normalization", 0, normalization},
      {"schedule", 0, schedule},
      {"inference passthrough", 0, inference_passthrough},
      {"gradient check", 30, gradient_check},
      {"regularization direction", 600, regularization},
      {"mask visualization", 0, mask_visualization},
      {"determinism", 0, determinism},
  };

  int failures = 0;
  std::size_t ran = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!only.empty() && std::find(only.begin(), only.end(), k + 1) == only.end()) continue;
    ++ran;
    const auto& c = criteria[k];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs >= c.limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.limit_s) + " s limit";
    }
    failures += !o.pass;
    std::printf("[%s] %2zu %-26s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", k + 1, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
