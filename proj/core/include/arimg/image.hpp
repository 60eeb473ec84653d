#pragma once

#include <cstdint>
#include <vector>

#include "arimg/errors.hpp"

namespace arimg {

// H x W x 3, row-major, channels last, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3, fill) {}

  float* at(int y, int x) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const float* at(int y, int x) const { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  std::size_t size() const noexcept { return pixels.size(); }

  bool operator==(const Image&) const = default;
};

// Quantizes to 8-bit RGB (clamped, round to nearest).
std::vector<std::uint8_t> to_rgb8(const Image& img);
Image from_rgb8(int height, int width, const std::vector<std::uint8_t>& rgb);

double mse(const Image& a, const Image& b);
// Nearest-neighbour 2x upsampling.
Image upsample_nearest(const Image& img);
Image clamp01(Image img);

}  // namespace arimg
