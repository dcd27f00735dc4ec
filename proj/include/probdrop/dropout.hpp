#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "probdrop/rng.hpp"
#include "probdrop/tensor.hpp"

namespace probdrop {

enum class Variant { Dropout, DropBlock, BatchDropBlock, ProbDropBlock };
enum class Mode { Train, Inference };

std::string_view to_string(Variant v);
/// Accepts "dropout", "dropblock", "batchdropblock", "probdropblock".
std::optional<Variant> parse_variant(std::string_view name);
bool is_block_variant(Variant v);

struct DropSpec {
  Variant variant = Variant::ProbDropBlock;
  /// Base drop probability; the element drop probability for plain Dropout.
  double alpha = 0.2;
  std::size_t block_size = 4;
  Mode mode = Mode::Train;
};

/// Throws std::invalid_argument / GeometryError if `spec` cannot be applied to `dims`.
void validate(const DropSpec& spec, const Dims& dims);

/// Linear ramp of the base drop probability: alpha(t) = alpha_target * t / T.
struct ScheduleState {
  double alpha_target = 0.2;
  std::uint64_t total_steps = 1;
  std::uint64_t step = 0;
};

double alpha_at(const ScheduleState& sched);

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const Cell&) const = default;
};

/// Extent of a block around its seed: rows seed-lower ... seed+upper inclusive.
struct BlockBounds {
  std::size_t lower = 0;
  std::size_t upper = 0;
  bool operator==(const BlockBounds&) const = default;
};

BlockBounds block_bounds(std::size_t block_size);

/// gamma[i,j] = |a[i,j]| / mean|a|. Returns nullopt when every entry is zero.
std::optional<Plane> compute_gamma(const Plane& slice);

/// q[i,j] = min(alpha * gamma[i,j], 1).
Plane compute_q(const Plane& gamma, double alpha);

/// One Bernoulli draw per cell in row-major order; cell is 0 with probability q.
PlaneMask sample_seed_mask(const Plane& q, SliceRng& rng);

/// Zero positions of a mask in row-major order.
std::vector<Cell> zero_cells(const PlaneMask& mask);

/// Zeroes the clipped block around every zero of `seed_mask`. Seeds are
/// collected before any cell is written.
PlaneMask expand_blocks(const PlaneMask& seed_mask, std::size_t block_size);

struct NormalizedPlane {
  Plane values;
  /// Factor applied to kept cells: N/kept, or 1 when nothing is kept.
  double scale = 1.0;
};

/// (a * m) * N / kept; all-zero output without scaling when kept == 0.
NormalizedPlane normalize_and_apply(const Plane& a, const PlaneMask& m);

/// Output of any variant. For every (b, c) slice,
/// output = input * mask * scales[b * C + c] exactly.
struct DropResult {
  FeatureMap output;
  DropMask mask;
  std::vector<double> scales;
  /// Pre-expansion zero seeds per slice; empty in Inference mode.
  std::vector<std::vector<Cell>> seeds;
};

/// Seed probabilities a block variant uses for one slice (q map). For
/// ProbDropBlock an all-zero slice yields q = 0 everywhere.
Plane seed_probabilities(const Plane& slice, Variant variant, double alpha);

DropResult prob_drop_block(const FeatureMap& a, const DropSpec& spec, const RngStream& rng);
DropResult drop_block(const FeatureMap& a, const DropSpec& spec, const RngStream& rng);
DropResult batch_drop_block(const FeatureMap& a, const DropSpec& spec, const RngStream& rng);
DropResult standard_dropout(const FeatureMap& a, const DropSpec& spec, const RngStream& rng);

/// Dispatches on spec.variant with spec.alpha as given.
DropResult run_variant(const FeatureMap& a, const DropSpec& spec, const RngStream& rng);

/// Dispatches on spec.variant with alpha replaced by alpha_at(sched).
DropResult apply(const FeatureMap& a, const DropSpec& spec, const ScheduleState& sched,
                 const RngStream& rng);

}  // namespace probdrop
