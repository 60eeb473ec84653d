#include "arimg/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace arimg {

std::vector<std::uint8_t> to_rgb8(const Image& img) {
  std::vector<std::uint8_t> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

Image from_rgb8(int height, int width, const std::vector<std::uint8_t>& rgb) {
  Image img(height, width);
  if (rgb.size() != img.pixels.size()) {
    throw ShapeError("from_rgb8: " + std::to_string(rgb.size()) + " bytes for " + std::to_string(height) + "x" +
                     std::to_string(width) + "x3");
  }
  for (std::size_t i = 0; i < rgb.size(); ++i) img.pixels[i] = static_cast<float>(rgb[i]) / 255.0f;
  return img;
}

double mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width || a.pixels.size() != b.pixels.size()) {
    throw ShapeError("mse: image sizes differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

Image upsample_nearest(const Image& img) {
  Image out(img.height * 2, img.width * 2);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) std::copy_n(img.at(y / 2, x / 2), 3, out.at(y, x));
  }
  return out;
}

Image clamp01(Image img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

}  // namespace arimg
