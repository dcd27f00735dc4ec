#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "probdrop/tensor.hpp"

namespace probdrop {

enum class IoErrc {
  open_failed,
  bad_magic,
  truncated,
  dim_overflow,
  unsupported_rank,
  unsupported_format,
  write_failed,
};

const char* to_string(IoErrc code);

class IoError : public std::runtime_error {
 public:
  IoError(IoErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  IoErrc code() const { return code_; }

 private:
  IoErrc code_;
};

// TensorFile layout, all integers little-endian:
//   "FMAP" | u32 rank | rank x u32 dims | prod(dims) x f32 payload (row-major)
// Files of rank < 4 are read with leading dims set to 1; writes always use rank 4.
// Payload is stored as 32-bit floats, so values narrow on write.
FeatureMap read_tensor(const std::filesystem::path& path);
void write_tensor(const FeatureMap& a, const std::filesystem::path& path);

// Binary PGM (P5) / PPM (P6), maxval 255. Loads as batch=1, channel 1 or 3,
// values in [0, 1]. Writes clamp to [0, 1] and round to the nearest byte.
FeatureMap read_image_ppm(const std::filesystem::path& path);
void write_image_ppm(const FeatureMap& a, const std::filesystem::path& path);

/// Writes a single plane as a P5 image; values are clamped to [0, 1].
void write_plane_pgm(const Plane& p, const std::filesystem::path& path);
/// Writes a binary mask as a P5 image: kept = 255, dropped = 0.
void write_mask_pgm(const PlaneMask& m, const std::filesystem::path& path);

}  // namespace probdrop
