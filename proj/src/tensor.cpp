#include "probdrop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace probdrop {

namespace {

void validate_dims(const Dims& d) {
  if (d.batch == 0 || d.channel == 0 || d.height == 0 || d.width == 0) {
    throw GeometryError("all dims must be >= 1, got " + to_string(d));
  }
}

void validate_bits(std::span<const std::uint8_t> bits) {
  for (auto b : bits) {
    if (b > 1) throw std::invalid_argument("mask values must be 0 or 1");
  }
}

}  // namespace

std::string to_string(const Dims& d) {
  return "(" + std::to_string(d.batch) + ", " + std::to_string(d.channel) + ", " +
         std::to_string(d.height) + ", " + std::to_string(d.width) + ")";
}

Plane::Plane(std::size_t h, std::size_t w, std::vector<double> v)
    : height(h), width(w), values(std::move(v)) {
  if (values.size() != h * w) throw GeometryError("plane data length does not match h*w");
}

PlaneMask::PlaneMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b)
    : height(h), width(w), bits(std::move(b)) {
  if (bits.size() != h * w) throw GeometryError("mask data length does not match h*w");
  validate_bits(bits);
}

std::size_t PlaneMask::count_kept() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

FeatureMap::FeatureMap(Dims dims, double fill) : dims_(dims) {
  validate_dims(dims_);
  if (!std::isfinite(fill)) throw std::invalid_argument("feature map values must be finite");
  data_.assign(dims_.numel(), fill);
}

FeatureMap::FeatureMap(Dims dims, std::vector<double> data)
    : dims_(dims), data_(std::move(data)) {
  validate_dims(dims_);
  if (data_.size() != dims_.numel()) {
    throw GeometryError("data length " + std::to_string(data_.size()) +
                        " does not match dims " + to_string(dims_));
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw std::invalid_argument("feature map values must be finite");
  }
}

std::span<const double> FeatureMap::plane_view(std::size_t b, std::size_t c) const {
  return std::span<const double>(data_).subspan(offset(b, c, 0, 0), dims_.plane_size());
}

std::span<double> FeatureMap::plane_view(std::size_t b, std::size_t c) {
  return std::span<double>(data_).subspan(offset(b, c, 0, 0), dims_.plane_size());
}

Plane FeatureMap::plane(std::size_t b, std::size_t c) const {
  auto v = plane_view(b, c);
  return Plane(dims_.height, dims_.width, std::vector<double>(v.begin(), v.end()));
}

void FeatureMap::set_plane(std::size_t b, std::size_t c, const Plane& p) {
  if (p.height != dims_.height || p.width != dims_.width) {
    throw GeometryError("plane shape does not match feature map");
  }
  std::copy(p.values.begin(), p.values.end(), plane_view(b, c).begin());
}

DropMask::DropMask(Dims dims, std::uint8_t fill) : dims_(dims) {
  validate_dims(dims_);
  if (fill > 1) throw std::invalid_argument("mask values must be 0 or 1");
  bits_.assign(dims_.numel(), fill);
}

DropMask::DropMask(Dims dims, std::vector<std::uint8_t> bits)
    : dims_(dims), bits_(std::move(bits)) {
  validate_dims(dims_);
  if (bits_.size() != dims_.numel()) throw GeometryError("mask length does not match dims");
  validate_bits(bits_);
}

PlaneMask DropMask::plane(std::size_t b, std::size_t c) const {
  const auto n = dims_.plane_size();
  const auto first = bits_.begin() + static_cast<std::ptrdiff_t>((b * dims_.channel + c) * n);
  return PlaneMask(dims_.height, dims_.width,
                   std::vector<std::uint8_t>(first, first + static_cast<std::ptrdiff_t>(n)));
}

void DropMask::set_plane(std::size_t b, std::size_t c, const PlaneMask& m) {
  if (m.height != dims_.height || m.width != dims_.width) {
    throw GeometryError("plane mask shape does not match drop mask");
  }
  std::copy(m.bits.begin(), m.bits.end(),
            bits_.begin() + static_cast<std::ptrdiff_t>((b * dims_.channel + c) * dims_.plane_size()));
}

std::size_t DropMask::count_kept() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

double mean_abs(std::span<const double> values) {
  if (values.empty()) throw GeometryError("mean_abs of an empty slice");
  double sum = 0.0;
  for (double v : values) sum += std::abs(v);
  return sum / static_cast<double>(values.size());
}

FeatureMap elementwise_mul(const FeatureMap& a, const DropMask& m) {
  if (a.dims() != m.dims()) {
    throw GeometryError("mask dims " + to_string(m.dims()) + " do not match " +
                        to_string(a.dims()));
  }
  std::vector<double> out(a.numel());
  auto av = a.data();
  auto mv = m.bits();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mv[i] ? av[i] : 0.0;
  return FeatureMap(a.dims(), std::move(out));
}

FeatureMap scale(const FeatureMap& a, double c) {
  if (!std::isfinite(c)) throw std::invalid_argument("scale factor must be finite");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  return FeatureMap(a.dims(), std::move(out));
}

}  // namespace probdrop
