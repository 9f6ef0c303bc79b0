#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "raypatch/errors.hpp"
#include "raypatch/tensor.hpp"

namespace raypatch {

// floor(clamp(v, 0, 1) * 255 + 0.5)
inline std::uint8_t to_byte(double v) {
  const double c = std::min(1.0, std::max(0.0, std::isnan(v) ? 0.0 : v));
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

// Binary P6, maxval 255, from [3, h, w].
inline std::string encode_ppm(const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("ppm: expected [3,h,w], got " + shape_str(rgb.shape()));
  const std::size_t h = rgb.dim(1), w = rgb.dim(2), n = h * w;
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  auto xs = rgb.data();
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(xs[c * n + p])));
  return out;
}

// Binary P5, maxval 65535, big-endian samples: depth in millimetres rounded
// half-up, saturated at 65535, 0 where the mask is 0 or depth is not finite.
inline std::string encode_depth_pgm(const Tensor& depth, const std::vector<std::uint8_t>& mask = {}) {
  if (depth.rank() != 3 || depth.dim(0) != 1) throw ShapeError("pgm: expected [1,h,w], got " + shape_str(depth.shape()));
  const std::size_t h = depth.dim(1), w = depth.dim(2);
  if (!mask.empty() && mask.size() != h * w) throw ShapeError("pgm: mask size does not match image");
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
  auto xs = depth.data();
  for (std::size_t p = 0; p < h * w; ++p) {
    std::uint16_t mm = 0;
    if ((mask.empty() || mask[p]) && std::isfinite(xs[p]) && xs[p] > 0.0) {
      mm = static_cast<std::uint16_t>(std::min(65535.0, std::floor(xs[p] * 1000.0 + 0.5)));
    }
    out.push_back(static_cast<char>(mm >> 8));
    out.push_back(static_cast<char>(mm & 0xFF));
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

// Parses "Px\nW H\nMAX\n" headers as written above (no comments).
inline PnmHeader parse_pnm_header(const std::string& bytes) {
  PnmHeader hdr;
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("pnm: truncated header");
    return bytes.substr(start, pos - start);
  };
  hdr.magic = token();
  hdr.width = std::stoul(token());
  hdr.height = std::stoul(token());
  hdr.maxval = std::stoul(token());
  hdr.data_offset = pos + 1;
  return hdr;
}

}  // namespace raypatch
