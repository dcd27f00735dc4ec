#include "probdrop/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <vector>

namespace probdrop {

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'M', 'A', 'P'};
// Keeps a hostile header from requesting an absurd allocation.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 31;

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::open_failed, path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(IoErrc::open_failed, path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(IoErrc::write_failed, path.string());
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

// Netpbm header: magic, width, height, maxval separated by whitespace and
// '#' comments, followed by exactly one whitespace byte.
struct PnmHeader {
  std::string magic;
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::vector<unsigned char>& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_token = [&] {
    skip_space();
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
      tok.push_back(static_cast<char>(bytes[pos++]));
    }
    if (tok.empty()) throw IoError(IoErrc::truncated, name + ": incomplete image header");
    return tok;
  };
  auto read_number = [&] {
    const std::string tok = read_token();
    if (!std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }) ||
        tok.size() > 9) {
      throw IoError(IoErrc::unsupported_format, name + ": bad header field '" + tok + "'");
    }
    return static_cast<std::size_t>(std::stoul(tok));
  };

  PnmHeader h;
  h.magic = read_token();
  if (h.magic != "P5" && h.magic != "P6") {
    throw IoError(IoErrc::bad_magic, name + ": expected P5 or P6, got '" + h.magic + "'");
  }
  h.width = read_number();
  h.height = read_number();
  h.maxval = read_number();
  if (h.maxval != 255) {
    throw IoError(IoErrc::unsupported_format, name + ": maxval " + std::to_string(h.maxval) +
                                                  " not supported (need 255)");
  }
  if (h.width == 0 || h.height == 0) throw IoError(IoErrc::dim_overflow, name + ": zero image size");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw IoError(IoErrc::truncated, name + ": missing separator after header");
  }
  h.data_offset = pos + 1;
  return h;
}

}  // namespace

const char* to_string(IoErrc code) {
  switch (code) {
    case IoErrc::open_failed: return "open failed";
    case IoErrc::bad_magic: return "bad magic";
    case IoErrc::truncated: return "truncated";
    case IoErrc::dim_overflow: return "dim overflow";
    case IoErrc::unsupported_rank: return "unsupported rank";
    case IoErrc::unsupported_format: return "unsupported format";
    case IoErrc::write_failed: return "write failed";
  }
  return "unknown";
}

FeatureMap read_tensor(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const std::string name = path.string();
  if (bytes.size() < 8) throw IoError(IoErrc::truncated, name + ": header shorter than 8 bytes");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw IoError(IoErrc::bad_magic, name);
  }
  const std::uint32_t rank = get_u32(bytes.data() + 4);
  if (rank == 0 || rank > 4) {
    throw IoError(IoErrc::unsupported_rank, name + ": rank " + std::to_string(rank));
  }
  const std::size_t header = 8 + 4 * std::size_t{rank};
  if (bytes.size() < header) throw IoError(IoErrc::truncated, name + ": dims cut short");

  std::array<std::size_t, 4> d = {1, 1, 1, 1};
  std::uint64_t count = 1;
  for (std::uint32_t k = 0; k < rank; ++k) {
    const std::uint32_t dim = get_u32(bytes.data() + 8 + 4 * k);
    if (dim == 0) throw IoError(IoErrc::dim_overflow, name + ": zero-sized dim");
    count *= dim;
    if (count > kMaxElements) throw IoError(IoErrc::dim_overflow, name + ": element count too large");
    d[4 - rank + k] = dim;
  }
  if (bytes.size() - header < count * 4) {
    throw IoError(IoErrc::truncated, name + ": payload has " + std::to_string((bytes.size() - header) / 4) +
                                         " of " + std::to_string(count) + " elements");
  }

  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float f = std::bit_cast<float>(get_u32(bytes.data() + header + 4 * i));
    data[i] = static_cast<double>(f);
  }
  return FeatureMap(Dims{d[0], d[1], d[2], d[3]}, std::move(data));
}

void write_tensor(const FeatureMap& a, const std::filesystem::path& path) {
  const auto& d = a.dims();
  for (std::size_t v : {d.batch, d.channel, d.height, d.width}) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      throw IoError(IoErrc::dim_overflow, "dimension exceeds 32 bits");
    }
  }
  std::vector<unsigned char> out;
  out.reserve(24 + 4 * a.numel());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, 4);
  for (std::size_t v : {d.batch, d.channel, d.height, d.width}) put_u32(out, static_cast<std::uint32_t>(v));
  for (double v : a.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  spit(path, out);
}

FeatureMap read_image_ppm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const auto h = parse_pnm_header(bytes, path.string());
  const std::size_t channels = h.magic == "P6" ? 3 : 1;
  const std::uint64_t need = std::uint64_t{h.width} * h.height * channels;
  if (need > kMaxElements) throw IoError(IoErrc::dim_overflow, path.string());
  if (bytes.size() - h.data_offset < need) {
    throw IoError(IoErrc::truncated, path.string() + ": pixel data cut short");
  }

  FeatureMap out(Dims{1, channels, h.height, h.width});
  const unsigned char* px = bytes.data() + h.data_offset;
  for (std::size_t i = 0; i < h.height; ++i) {
    for (std::size_t j = 0; j < h.width; ++j) {
      for (std::size_t c = 0; c < channels; ++c) {
        out(0, c, i, j) = static_cast<double>(px[(i * h.width + j) * channels + c]) / 255.0;
      }
    }
  }
  return out;
}

void write_image_ppm(const FeatureMap& a, const std::filesystem::path& path) {
  const auto& d = a.dims();
  if (d.batch != 1 || (d.channel != 1 && d.channel != 3)) {
    throw GeometryError("image output needs batch 1 and 1 or 3 channels, got " + to_string(d));
  }
  const std::string header = (d.channel == 3 ? "P6\n" : "P5\n") + std::to_string(d.width) + " " +
                             std::to_string(d.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + a.numel());
  for (std::size_t i = 0; i < d.height; ++i) {
    for (std::size_t j = 0; j < d.width; ++j) {
      for (std::size_t c = 0; c < d.channel; ++c) out.push_back(to_byte(a(0, c, i, j)));
    }
  }
  spit(path, out);
}

void write_plane_pgm(const Plane& p, const std::filesystem::path& path) {
  write_image_ppm(FeatureMap(Dims{1, 1, p.height, p.width}, p.values), path);
}

void write_mask_pgm(const PlaneMask& m, const std::filesystem::path& path) {
  std::vector<double> v(m.bits.begin(), m.bits.end());
  write_image_ppm(FeatureMap(Dims{1, 1, m.height, m.width}, std::move(v)), path);
}

}  // namespace probdrop
