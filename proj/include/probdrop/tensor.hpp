#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace probdrop {

/// Raised when shapes are empty, mismatched, or otherwise unusable.
class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// (batch, channel, height, width); width is the fastest-varying axis.
struct Dims {
  std::size_t batch = 1;
  std::size_t channel = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t numel() const { return batch * channel * height * width; }
  std::size_t plane_size() const { return height * width; }
  std::size_t num_planes() const { return batch * channel; }

  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

/// A single (batch, channel) slice, or any standalone 2-D real map.
struct Plane {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), values(h * w, fill) {}
  Plane(std::size_t h, std::size_t w, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  double& at(std::size_t i, std::size_t j) { return values[i * width + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * width + j]; }

  bool operator==(const Plane&) const = default;
};

/// Binary 2-D map; 1 = keep, 0 = drop.
struct PlaneMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  PlaneMask() = default;
  PlaneMask(std::size_t h, std::size_t w, std::uint8_t fill = 1)
      : height(h), width(w), bits(h * w, fill) {}
  PlaneMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> b);

  std::size_t size() const { return bits.size(); }
  std::uint8_t& at(std::size_t i, std::size_t j) { return bits[i * width + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return bits[i * width + j]; }
  std::size_t count_kept() const;

  bool operator==(const PlaneMask&) const = default;
};

/// Dense 4-D activation tensor. Values are validated finite on construction.
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(Dims dims, double fill = 0.0);
  FeatureMap(Dims dims, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  std::size_t numel() const { return data_.size(); }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double& operator()(std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
    return data_[offset(b, c, i, j)];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t i, std::size_t j) const {
    return data_[offset(b, c, i, j)];
  }

  std::span<const double> plane_view(std::size_t b, std::size_t c) const;
  std::span<double> plane_view(std::size_t b, std::size_t c);
  Plane plane(std::size_t b, std::size_t c) const;
  void set_plane(std::size_t b, std::size_t c, const Plane& p);

  bool operator==(const FeatureMap&) const = default;

 private:
  std::size_t offset(std::size_t b, std::size_t c, std::size_t i, std::size_t j) const {
    return ((b * dims_.channel + c) * dims_.height + i) * dims_.width + j;
  }

  Dims dims_{};
  std::vector<double> data_;
};

/// Binary tensor with the same layout as FeatureMap.
class DropMask {
 public:
  DropMask() = default;
  explicit DropMask(Dims dims, std::uint8_t fill = 1);
  DropMask(Dims dims, std::vector<std::uint8_t> bits);

  static DropMask ones(Dims dims) { return DropMask(dims, 1); }

  const Dims& dims() const { return dims_; }
  std::size_t numel() const { return bits_.size(); }
  std::span<const std::uint8_t> bits() const { return bits_; }

  std::uint8_t operator()(std::size_t b, std::size_t c, std::size_t i, std::size_t j) const {
    return bits_[((b * dims_.channel + c) * dims_.height + i) * dims_.width + j];
  }

  PlaneMask plane(std::size_t b, std::size_t c) const;
  void set_plane(std::size_t b, std::size_t c, const PlaneMask& m);
  std::size_t count_kept() const;
  bool all_ones() const { return count_kept() == bits_.size(); }

  bool operator==(const DropMask&) const = default;

 private:
  Dims dims_{};
  std::vector<std::uint8_t> bits_;
};

/// Mean absolute value over every entry (zeros included in the count).
double mean_abs(std::span<const double> values);

FeatureMap elementwise_mul(const FeatureMap& a, const DropMask& m);
FeatureMap scale(const FeatureMap& a, double c);

}  // namespace probdrop
