#include "probdrop/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace probdrop {

namespace {

struct Tally {
  std::vector<std::uint64_t> zeros;
  std::uint64_t consistent = 0;
  std::uint64_t violations = 0;

  explicit Tally(std::size_t n) : zeros(n, 0) {}

  void merge(const Tally& o) {
    for (std::size_t k = 0; k < zeros.size(); ++k) zeros[k] += o.zeros[k];
    consistent += o.consistent;
    violations += o.violations;
  }
};

PlaneMask block_union(std::size_t h, std::size_t w, std::span<const Cell> seeds, std::size_t block_size) {
  PlaneMask seeded(h, w, 1);
  for (const auto& s : seeds) {
    if (s.row >= h || s.col >= w) throw GeometryError("seed lies outside the mask");
    seeded.at(s.row, s.col) = 0;
  }
  return expand_blocks(seeded, block_size);
}

void run_trial(const FeatureMap& input, const DropSpec& spec, std::uint64_t seed,
               const HarnessOptions& options, Tally& tally) {
  const auto& d = input.dims();
  auto result = run_variant(input, spec, RngStream{seed, 0});
  const std::size_t contiguity_block = spec.variant == Variant::Dropout ? 1 : spec.block_size;

  std::vector<PlaneMask> planes;
  planes.reserve(d.num_planes());
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channel; ++c) planes.push_back(result.mask.plane(b, c));
  }

  if (options.inject_fault) {
    auto& p = planes.front();
    auto it = std::find(p.bits.begin(), p.bits.end(), std::uint8_t{1});
    if (it != p.bits.end()) *it = 0;
  }

  for (std::size_t b = 0; b < d.batch; ++b) {
    bool same = true;
    for (std::size_t c = 0; c < d.channel; ++c) {
      const auto idx = b * d.channel + c;
      const auto& p = planes[idx];
      const std::size_t base = idx * d.plane_size();
      for (std::size_t k = 0; k < p.size(); ++k) tally.zeros[base + k] += p.bits[k] == 0;
      if (spec.mode == Mode::Train) {
        tally.violations += check_contiguity(p, result.seeds[idx], contiguity_block);
      }
      if (c > 0 && p.bits != planes[b * d.channel].bits) same = false;
    }
    tally.consistent += same;
  }
}

}  // namespace

std::vector<double> analytic_drop_rates(const FeatureMap& input, const DropSpec& spec) {
  validate(spec, input.dims());
  const auto& d = input.dims();
  std::vector<double> out(d.numel(), 0.0);
  if (spec.mode == Mode::Inference) return out;

  const std::size_t block = spec.variant == Variant::Dropout ? 1 : spec.block_size;
  const auto bounds = block_bounds(block);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channel; ++c) {
      const Plane q = seed_probabilities(input.plane(b, c), spec.variant, spec.alpha);
      const std::size_t base = (b * d.channel + c) * d.plane_size();
      for (std::size_t i = 0; i < d.height; ++i) {
        for (std::size_t j = 0; j < d.width; ++j) {
          // A seed at row s covers rows s - lower ... s + upper, so the seeds
          // covering row i lie in i - upper ... i + lower.
          const std::size_t r0 = i >= bounds.upper ? i - bounds.upper : 0;
          const std::size_t c0 = j >= bounds.upper ? j - bounds.upper : 0;
          const std::size_t r1 = std::min(i + bounds.lower, d.height - 1);
          const std::size_t c1 = std::min(j + bounds.lower, d.width - 1);
          double survive = 1.0;
          for (std::size_t r = r0; r <= r1; ++r) {
            for (std::size_t s = c0; s <= c1; ++s) survive *= 1.0 - q.at(r, s);
          }
          out[base + i * d.width + j] = 1.0 - survive;
        }
      }
    }
  }
  return out;
}

std::size_t check_contiguity(const PlaneMask& mask, std::span<const Cell> seeds, std::size_t block_size) {
  const auto expected = block_union(mask.height, mask.width, seeds, block_size);
  std::size_t bad = 0;
  for (std::size_t k = 0; k < mask.size(); ++k) bad += mask.bits[k] != expected.bits[k];
  return bad;
}

TrialReport estimate_drop_rates(const FeatureMap& input, const DropSpec& spec, std::size_t trials,
                                std::uint64_t seed, const HarnessOptions& options) {
  if (trials == 0) throw std::invalid_argument("trials must be >= 1");
  validate(spec, input.dims());
  const auto& d = input.dims();

  unsigned workers = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, trials));

  std::vector<Tally> tallies(workers, Tally(d.numel()));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](unsigned w) {
    try {
      for (std::size_t t = w; t < trials; t += workers) {
        run_trial(input, spec, seed + t, options, tallies[w]);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Tally total(d.numel());
  for (const auto& t : tallies) total.merge(t);

  TrialReport r;
  r.spec = spec;
  r.dims = d;
  r.trials = trials;
  r.seed = seed;
  r.expected_rates = analytic_drop_rates(input, spec);
  r.rates.resize(d.numel());
  r.ci_half_widths.resize(d.numel());
  const double n = static_cast<double>(trials);
  std::uint64_t zero_total = 0;
  for (std::size_t k = 0; k < d.numel(); ++k) {
    zero_total += total.zeros[k];
    r.rates[k] = static_cast<double>(total.zeros[k]) / n;
    const double e = r.expected_rates[k];
    r.ci_half_widths[k] = kBandSigmas * std::sqrt(e * (1.0 - e) / n);
    // Degenerate probabilities (0 or 1) must be hit exactly.
    const double slack = 1e-12;
    if (std::abs(r.rates[k] - e) > r.ci_half_widths[k] + slack) r.failing_positions.push_back(k);
  }
  r.mean_drop_fraction = static_cast<double>(zero_total) / (n * static_cast<double>(d.numel()));
  r.channel_consistent_fraction = static_cast<double>(total.consistent) / (n * static_cast<double>(d.batch));
  r.violations = total.violations;
  return r;
}

std::string_view to_string(SweepAxis axis) {
  return axis == SweepAxis::Alpha ? "alpha" : "block_size";
}

SweepResult sweep(SweepAxis axis, std::span<const double> values, const SweepMetric& metric,
                  std::span<const std::uint64_t> seeds) {
  if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
  if (seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (!(values[k] > values[k - 1])) throw std::invalid_argument("sweep values must be strictly increasing");
  }

  SweepResult out{axis, {}};
  for (double v : values) {
    SweepPoint p;
    p.value = v;
    for (auto s : seeds) {
      try {
        const double m = metric(v, s);
        if (!std::isfinite(m)) throw std::runtime_error("metric is not finite");
        p.samples.push_back(m);
      } catch (const std::exception& e) {
        p.failures.push_back("seed " + std::to_string(s) + ": " + e.what());
      }
    }
    if (p.samples.empty()) {
      p.mean = p.sd = std::numeric_limits<double>::quiet_NaN();
    } else {
      const double k = static_cast<double>(p.samples.size());
      p.mean = std::accumulate(p.samples.begin(), p.samples.end(), 0.0) / k;
      double ss = 0.0;
      for (double x : p.samples) ss += (x - p.mean) * (x - p.mean);
      p.sd = std::sqrt(ss / k);
    }
    out.points.push_back(std::move(p));
  }
  return out;
}

nlohmann::json to_json(const TrialReport& r) {
  nlohmann::json j;
  j["variant"] = std::string(to_string(r.spec.variant));
  j["alpha"] = r.spec.alpha;
  j["block_size"] = r.spec.block_size;
  j["mode"] = r.spec.mode == Mode::Train ? "train" : "inference";
  j["dims"] = {r.dims.batch, r.dims.channel, r.dims.height, r.dims.width};
  j["trials"] = r.trials;
  j["seed"] = r.seed;
  j["rates"] = r.rates;
  j["expected_rates"] = r.expected_rates;
  j["ci_half_widths"] = r.ci_half_widths;
  j["mean_drop_fraction"] = r.mean_drop_fraction;
  j["channel_consistent_fraction"] = r.channel_consistent_fraction;
  j["violations"] = r.violations;
  j["failing_positions"] = r.failing_positions;
  j["passed"] = r.passed();
  return j;
}

nlohmann::json to_json(const SweepResult& r) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : r.points) {
    nlohmann::json jp;
    jp["value"] = p.value;
    // NaN has no JSON spelling; a point with no successful seed reports null.
    jp["mean"] = p.samples.empty() ? nlohmann::json(nullptr) : nlohmann::json(p.mean);
    jp["sd"] = p.samples.empty() ? nlohmann::json(nullptr) : nlohmann::json(p.sd);
    jp["samples"] = p.samples;
    jp["failures"] = p.failures;
    points.push_back(std::move(jp));
  }
  return nlohmann::json{{"sweep_axis", std::string(to_string(r.axis))}, {"points", std::move(points)}};
}

}  // namespace probdrop
