#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "probdrop/dropout.hpp"
#include "probdrop/tensor.hpp"

#include <json.hpp>

namespace probdrop {

/// Width of every binomial acceptance band, in standard errors.
inline constexpr double kBandSigmas = 4.0;

struct TrialReport {
  DropSpec spec;
  Dims dims;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  /// Per-element zero frequency of the returned mask, same layout as the input.
  std::vector<double> rates;
  /// Exact per-element drop probability implied by the seed probabilities.
  std::vector<double> expected_rates;
  /// kBandSigmas binomial standard errors around expected_rates.
  std::vector<double> ci_half_widths;
  double mean_drop_fraction = 0.0;
  /// Fraction of (trial, batch item) pairs whose channel masks are all identical.
  double channel_consistent_fraction = 1.0;
  std::size_t violations = 0;
  /// Flat indices whose rate falls outside its band.
  std::vector<std::size_t> failing_positions;

  bool passed() const { return violations == 0 && failing_positions.empty(); }
};

struct HarnessOptions {
  /// 0 picks std::thread::hardware_concurrency().
  unsigned threads = 0;
  /// Negative control: zero one extra cell outside every block in each trial.
  bool inject_fault = false;
};

/// Runs `trials` independent draws of spec's variant, trial t using
/// RngStream{seed + t}. Counts are merged as integers, so the report does not
/// depend on the thread count.
TrialReport estimate_drop_rates(const FeatureMap& input, const DropSpec& spec, std::size_t trials,
                                std::uint64_t seed, const HarnessOptions& options = {});

/// Exact probability that each element ends up dropped:
/// 1 - prod(1 - q_s) over the seed positions s whose clipped block covers it.
std::vector<double> analytic_drop_rates(const FeatureMap& input, const DropSpec& spec);

/// Number of cells where the mask's zero set differs from the union of
/// clipped blocks around `seeds`.
std::size_t check_contiguity(const PlaneMask& mask, std::span<const Cell> seeds,
                             std::size_t block_size);

enum class SweepAxis { Alpha, BlockSize };

std::string_view to_string(SweepAxis axis);

struct SweepPoint {
  double value = 0.0;
  double mean = 0.0;
  /// Population standard deviation over the seeds that succeeded.
  double sd = 0.0;
  std::vector<double> samples;
  std::vector<std::string> failures;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::Alpha;
  std::vector<SweepPoint> points;
};

using SweepMetric = std::function<double(double value, std::uint64_t seed)>;

/// Evaluates `metric` at every (value, seed). A throwing evaluation is
/// recorded in that point's failures and the sweep moves on.
SweepResult sweep(SweepAxis axis, std::span<const double> values, const SweepMetric& metric,
                  std::span<const std::uint64_t> seeds);

nlohmann::json to_json(const TrialReport& r);
nlohmann::json to_json(const SweepResult& r);

}  // namespace probdrop
