#include "probdrop/dropout.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace probdrop {

namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
}

DropResult passthrough(const FeatureMap& a) {
  const auto& d = a.dims();
  return DropResult{a, DropMask::ones(d), std::vector<double>(d.num_planes(), 1.0),
                    std::vector<std::vector<Cell>>(d.num_planes())};
}

// Shared tail of every block variant: one expanded mask per slice, applied
// and renormalized per slice.
void apply_plane(const FeatureMap& a, std::size_t b, std::size_t c, const PlaneMask& expanded,
                 std::vector<Cell> seeds, DropResult& out) {
  const auto idx = b * a.dims().channel + c;
  auto norm = normalize_and_apply(a.plane(b, c), expanded);
  out.output.set_plane(b, c, norm.values);
  out.mask.set_plane(b, c, expanded);
  out.scales[idx] = norm.scale;
  out.seeds[idx] = std::move(seeds);
}

DropResult blockwise(const FeatureMap& a, const DropSpec& spec, const RngStream& rng, Variant expected) {
  if (spec.variant != expected) {
    throw std::invalid_argument("spec variant is " + std::string(to_string(spec.variant)) +
                                ", expected " + std::string(to_string(expected)));
  }
  validate(spec, a.dims());
  if (spec.mode == Mode::Inference) return passthrough(a);

  const auto& d = a.dims();
  DropResult out{FeatureMap(d), DropMask::ones(d), std::vector<double>(d.num_planes(), 1.0),
                 std::vector<std::vector<Cell>>(d.num_planes())};

  for (std::size_t b = 0; b < d.batch; ++b) {
    if (expected == Variant::BatchDropBlock) {
      // One mask per batch item, shared by every channel.
      auto stream = rng.substream(b, 0);
      const Plane q(d.height, d.width, spec.alpha);
      const auto seed_mask = sample_seed_mask(q, stream);
      const auto seeds = zero_cells(seed_mask);
      const auto expanded = expand_blocks(seed_mask, spec.block_size);
      for (std::size_t c = 0; c < d.channel; ++c) apply_plane(a, b, c, expanded, seeds, out);
      continue;
    }
    for (std::size_t c = 0; c < d.channel; ++c) {
      const Plane slice = a.plane(b, c);
      if (expected == Variant::ProbDropBlock && !compute_gamma(slice)) {
        // No saliency to rank: leave the slice untouched.
        out.output.set_plane(b, c, slice);
        continue;
      }
      auto stream = rng.substream(b, c);
      const auto q = seed_probabilities(slice, expected, spec.alpha);
      const auto seed_mask = sample_seed_mask(q, stream);
      apply_plane(a, b, c, expand_blocks(seed_mask, spec.block_size), zero_cells(seed_mask), out);
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Dropout: return "dropout";
    case Variant::DropBlock: return "dropblock";
    case Variant::BatchDropBlock: return "batchdropblock";
    case Variant::ProbDropBlock: return "probdropblock";
  }
  return "unknown";
}

std::optional<Variant> parse_variant(std::string_view name) {
  for (auto v : {Variant::Dropout, Variant::DropBlock, Variant::BatchDropBlock, Variant::ProbDropBlock}) {
    if (name == to_string(v)) return v;
  }
  return std::nullopt;
}

bool is_block_variant(Variant v) { return v != Variant::Dropout; }

void validate(const DropSpec& spec, const Dims& dims) {
  check_alpha(spec.alpha);
  if (spec.variant == Variant::Dropout && spec.alpha >= 1.0) {
    throw std::invalid_argument("dropout probability must be < 1");
  }
  if (spec.block_size == 0) throw GeometryError("block size must be >= 1");
  if (is_block_variant(spec.variant) &&
      spec.block_size > std::min(dims.height, dims.width)) {
    throw GeometryError("block size " + std::to_string(spec.block_size) +
                        " does not fit a " + std::to_string(dims.height) + "x" +
                        std::to_string(dims.width) + " map");
  }
}

double alpha_at(const ScheduleState& sched) {
  check_alpha(sched.alpha_target);
  if (sched.total_steps == 0) throw std::invalid_argument("schedule needs total_steps >= 1");
  if (sched.step > sched.total_steps) {
    throw std::invalid_argument("schedule step " + std::to_string(sched.step) + " exceeds total " +
                                std::to_string(sched.total_steps));
  }
  // Ratio first so the endpoints and midpoint come out exact.
  const double progress = static_cast<double>(sched.step) / static_cast<double>(sched.total_steps);
  return sched.alpha_target * progress;
}

BlockBounds block_bounds(std::size_t block_size) {
  if (block_size == 0) throw GeometryError("block size must be >= 1");
  // floor((B-1)/2) and round-half-up((B-1)/2); the latter is B/2 in integers.
  return BlockBounds{(block_size - 1) / 2, block_size / 2};
}

std::optional<Plane> compute_gamma(const Plane& slice) {
  const double mean = mean_abs(slice.values);
  if (mean == 0.0) return std::nullopt;
  Plane gamma(slice.height, slice.width);
  for (std::size_t k = 0; k < slice.size(); ++k) gamma.values[k] = std::abs(slice.values[k]) / mean;
  return gamma;
}

Plane compute_q(const Plane& gamma, double alpha) {
  check_alpha(alpha);
  Plane q(gamma.height, gamma.width);
  for (std::size_t k = 0; k < gamma.size(); ++k) {
    if (gamma.values[k] < 0.0) throw std::invalid_argument("gamma must be non-negative");
    q.values[k] = std::min(alpha * gamma.values[k], 1.0);
  }
  return q;
}

PlaneMask sample_seed_mask(const Plane& q, SliceRng& rng) {
  PlaneMask m(q.height, q.width, 1);
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (rng.bernoulli(q.values[k])) m.bits[k] = 0;
  }
  return m;
}

std::vector<Cell> zero_cells(const PlaneMask& mask) {
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < mask.height; ++i) {
    for (std::size_t j = 0; j < mask.width; ++j) {
      if (mask.at(i, j) == 0) cells.push_back({i, j});
    }
  }
  return cells;
}

PlaneMask expand_blocks(const PlaneMask& seed_mask, std::size_t block_size) {
  const auto bounds = block_bounds(block_size);
  const auto seeds = zero_cells(seed_mask);
  PlaneMask out = seed_mask;
  for (const auto& s : seeds) {
    const std::size_t r0 = s.row >= bounds.lower ? s.row - bounds.lower : 0;
    const std::size_t c0 = s.col >= bounds.lower ? s.col - bounds.lower : 0;
    const std::size_t r1 = std::min(s.row + bounds.upper, out.height - 1);
    const std::size_t c1 = std::min(s.col + bounds.upper, out.width - 1);
    for (std::size_t i = r0; i <= r1; ++i) {
      for (std::size_t j = c0; j <= c1; ++j) out.at(i, j) = 0;
    }
  }
  return out;
}

NormalizedPlane normalize_and_apply(const Plane& a, const PlaneMask& m) {
  if (a.height != m.height || a.width != m.width) {
    throw GeometryError("mask shape does not match slice shape");
  }
  const std::size_t kept = m.count_kept();
  NormalizedPlane out{Plane(a.height, a.width), 1.0};
  if (kept == 0) return out;
  out.scale = static_cast<double>(a.size()) / static_cast<double>(kept);
  for (std::size_t k = 0; k < a.size(); ++k) {
    out.values.values[k] = m.bits[k] ? a.values[k] * out.scale : 0.0;
  }
  return out;
}

Plane seed_probabilities(const Plane& slice, Variant variant, double alpha) {
  switch (variant) {
    case Variant::ProbDropBlock:
      if (auto gamma = compute_gamma(slice)) return compute_q(*gamma, alpha);
      return Plane(slice.height, slice.width, 0.0);
    case Variant::DropBlock:
    case Variant::BatchDropBlock:
    case Variant::Dropout:
      check_alpha(alpha);
      return Plane(slice.height, slice.width, alpha);
  }
  return Plane(slice.height, slice.width, 0.0);
}

DropResult prob_drop_block(const FeatureMap& a, const DropSpec& spec, const RngStream& rng) {
  return blockwise(a, spec, rng, Variant::ProbDropBlock);
}

DropResult drop_block(const FeatureMap& a, const DropSpec& spec, const RngStream& rng) {
  return blockwise(a, spec, rng, Variant::DropBlock);
}

DropResult batch_drop_block(const FeatureMap& a, const DropSpec& spec, const RngStream& rng) {
  return blockwise(a, spec, rng, Variant::BatchDropBlock);
}

DropResult standard_dropout(const FeatureMap& a, const DropSpec& spec, const RngStream& rng) {
  if (spec.variant != Variant::Dropout) throw std::invalid_argument("spec variant is not dropout");
  validate(spec, a.dims());
  if (spec.mode == Mode::Inference) return passthrough(a);
  if (spec.alpha >= 1.0) throw std::invalid_argument("dropout probability must be < 1");

  const auto& d = a.dims();
  const double keep_scale = 1.0 / (1.0 - spec.alpha);
  DropResult out{FeatureMap(d), DropMask::ones(d), std::vector<double>(d.num_planes(), keep_scale),
                 std::vector<std::vector<Cell>>(d.num_planes())};
  const Plane q(d.height, d.width, spec.alpha);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channel; ++c) {
      auto stream = rng.substream(b, c);
      const auto m = sample_seed_mask(q, stream);
      auto src = a.plane_view(b, c);
      auto dst = out.output.plane_view(b, c);
      for (std::size_t k = 0; k < m.size(); ++k) dst[k] = m.bits[k] ? src[k] * keep_scale : 0.0;
      out.mask.set_plane(b, c, m);
      out.seeds[b * d.channel + c] = zero_cells(m);
    }
  }
  return out;
}

DropResult run_variant(const FeatureMap& a, const DropSpec& spec, const RngStream& rng) {
  switch (spec.variant) {
    case Variant::Dropout: return standard_dropout(a, spec, rng);
    case Variant::DropBlock: return drop_block(a, spec, rng);
    case Variant::BatchDropBlock: return batch_drop_block(a, spec, rng);
    case Variant::ProbDropBlock: return prob_drop_block(a, spec, rng);
  }
  throw std::invalid_argument("unknown variant");
}

DropResult apply(const FeatureMap& a, const DropSpec& spec, const ScheduleState& sched,
                 const RngStream& rng) {
  DropSpec scheduled = spec;
  scheduled.alpha = alpha_at(sched);
  return run_variant(a, scheduled, rng);
}

}  // namespace probdrop
