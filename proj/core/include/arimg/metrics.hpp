#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "arimg/data.hpp"
#include "arimg/image.hpp"

namespace arimg {

struct GaussianStats {
  int d = 0;
  std::int64_t n = 0;
  std::vector<double> mean;  // d
  std::vector<double> cov;   // d x d, row-major
};

// Sample mean and unbiased covariance of n rows of equal length d. Needs n >= 2.
GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features);

// Squared Frechet distance between two Gaussians. Clamped at 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

using FeatureFn = std::function<std::vector<double>(const Image&)>;

double fid(const std::vector<Image>& a, const std::vector<Image>& b, const FeatureFn& features);

// 4x4 average-pooled colour, a cheap stand-in feature map when no image tower
// is available. 48 values for a 32x32 image.
std::vector<double> pooled_pixel_features(const Image& img);

struct ObjectCheck {
  bool present = false;  // enough foreground in the object's cell
  bool shape = false;    // best glyph template is the asked shape
  bool color = false;    // mean foreground colour nearest the asked palette entry
  double iou = 0.0;      // IoU of the foreground mask with the asked glyph
  int detected_color = -1;
};

struct OracleReport {
  std::vector<ObjectCheck> objects;
  int satisfied = 0;
  int total = 0;
  double score() const { return total ? static_cast<double>(satisfied) / total : 0.0; }
};

// Three assertions per object: presence in its cell (which also encodes the
// relation, since cells follow from it), glyph shape, colour.
OracleReport alignment_report(const Image& img, const SceneSpec& spec);
double alignment_oracle(const Image& img, const SceneSpec& spec);

// {"metric","value","n_a","n_b","feature_fn","seed"} on one line.
std::string metric_json_line(const std::string& metric, double value, std::int64_t n_a, std::int64_t n_b,
                             const std::string& feature_fn, std::uint64_t seed);

}  // namespace arimg
