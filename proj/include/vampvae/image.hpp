#pragma once

// 8-bit binary PGM (P5) output for image grids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vampvae/errors.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Tiles the first cols*rows rows of `images` (each H*W) into a grid with
/// `margin` pixels of black border around and between tiles.
inline GrayImage render_grid(const Matrix& images, std::size_t height, std::size_t width, std::size_t cols,
                             std::size_t margin = 1) {
  if (height * width != images.cols) throw DimensionError("render_grid: image shape does not match row width");
  if (cols == 0) throw ContractError("render_grid: cols must be >= 1");
  const std::size_t n = images.rows;
  const std::size_t rows = std::max<std::size_t>(1, (n + cols - 1) / cols);
  GrayImage img;
  img.width = cols * width + (cols + 1) * margin;
  img.height = rows * height + (rows + 1) * margin;
  img.pixels.assign(img.width * img.height, 0);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t top = margin + (k / cols) * (height + margin);
    const std::size_t left = margin + (k % cols) * (width + margin);
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c) img.at(top + r, left + c) = to_byte(images(k, r * width + c));
  }
  return img;
}

/// Places images left to right, top-aligned, on a black background.
inline GrayImage hconcat(const std::vector<GrayImage>& parts) {
  GrayImage out;
  for (const auto& p : parts) {
    out.width += p.width;
    out.height = std::max(out.height, p.height);
  }
  out.pixels.assign(out.width * out.height, 0);
  std::size_t left = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < p.height; ++r)
      for (std::size_t c = 0; c < p.width; ++c) out.at(r, left + c) = p.at(r, c);
    left += p.width;
  }
  return out;
}

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(img.pixels.begin(), img.pixels.end());
  return out;
}

inline void write_pgm(const GrayImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = encode_pgm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace vampvae
