#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdet/tensor.hpp"

namespace cdet {

/// 8-bit grayscale image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Writes a plain (P2) graymap.
void write_pgm(const std::filesystem::path& path, const Image& image);
/// Reads plain graymaps (P2) and plain pixmaps (P3, averaged to gray).
/// Throws IoError.
Image read_pnm(const std::filesystem::path& path);

/// (1, H, W) tensor with values pixel / 255 - 0.5.
Tensor to_tensor(const Image& image);

Image flip_horizontal(const Image& image);
/// Bilinear resample of the region [x0, x0 + w) x [y0, y0 + h) to out_w x out_h.
Image resample(const Image& image, double x0, double y0, double w, double h, int out_w, int out_h);

}  // namespace cdet
