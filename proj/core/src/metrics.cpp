#include "arimg/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "arimg/errors.hpp"

namespace arimg {

namespace {

using Mat = Eigen::MatrixXd;

// Negative eigenvalues are rounding noise on a PSD matrix; clamp them to 0.
Mat sym_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!std::isfinite(ev[i])) throw NumericError("frechet_distance: non-finite eigenvalue");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Mat as_matrix(const GaussianStats& s) {
  if (s.d < 1 || s.cov.size() != static_cast<std::size_t>(s.d) * s.d || s.mean.size() != static_cast<std::size_t>(s.d)) {
    throw ContractError("gaussian stats: inconsistent sizes");
  }
  Mat m(s.d, s.d);
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.d; ++j) m(i, j) = s.cov[static_cast<std::size_t>(i) * s.d + j];
  }
  // symmetrize away rounding asymmetry
  return 0.5 * (m + m.transpose());
}

constexpr double kForegroundDist = 0.3;
constexpr double kPresenceFrac = 0.15;
constexpr double kShapeIou = 0.6;

}  // namespace

GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw ContractError("gaussian_stats: need at least 2 samples");
  const auto d = features[0].size();
  if (d == 0) throw ContractError("gaussian_stats: empty feature vectors");
  for (const auto& f : features) {
    if (f.size() != d) throw ShapeError("gaussian_stats: ragged feature rows");
  }
  const auto n = static_cast<Eigen::Index>(features.size());
  Mat x(n, static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, static_cast<Eigen::Index>(j)) = features[static_cast<std::size_t>(i)][j];
  }
  const Eigen::VectorXd mu = x.colwise().mean();
  x.rowwise() -= mu.transpose();
  const Mat cov = (x.transpose() * x) / static_cast<double>(n - 1);
  GaussianStats s;
  s.d = static_cast<int>(d);
  s.n = n;
  s.mean.assign(mu.data(), mu.data() + mu.size());
  s.cov.resize(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) s.cov[i * d + j] = cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.d != b.d) {
    throw ShapeError("frechet_distance: dimension " + std::to_string(a.d) + " vs " + std::to_string(b.d));
  }
  const Mat sa = as_matrix(a);
  const Mat sb = as_matrix(b);
  double mean_term = 0.0;
  for (int i = 0; i < a.d; ++i) {
    const double diff = a.mean[static_cast<std::size_t>(i)] - b.mean[static_cast<std::size_t>(i)];
    mean_term += diff * diff;
  }
  // Tr((Sa Sb)^1/2) = Tr((Sa^1/2 Sb Sa^1/2)^1/2), and the inner matrix is symmetric.
  const Mat ra = sym_sqrt(sa);
  Mat inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(inner, Eigen::EigenvaluesOnly);
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (!std::isfinite(ev)) throw NumericError("frechet_distance: non-finite eigenvalue");
    tr_sqrt += std::sqrt(std::max(ev, 0.0));
  }
  const double value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(value)) throw NumericError("frechet_distance: non-finite result");
  return std::max(value, 0.0);
}

double fid(const std::vector<Image>& a, const std::vector<Image>& b, const FeatureFn& features) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("fid: each image set needs at least 2 images");
  std::vector<std::vector<double>> fa, fb;
  fa.reserve(a.size());
  fb.reserve(b.size());
  for (const auto& img : a) fa.push_back(features(img));
  for (const auto& img : b) fb.push_back(features(img));
  return frechet_distance(gaussian_stats(fa), gaussian_stats(fb));
}

std::vector<double> pooled_pixel_features(const Image& img) {
  const int bh = std::max(1, img.height / 4);
  const int bw = std::max(1, img.width / 4);
  std::vector<double> out;
  out.reserve(48);
  for (int by = 0; by < 4; ++by) {
    for (int bx = 0; bx < 4; ++bx) {
      double acc[3] = {0, 0, 0};
      int cnt = 0;
      for (int y = by * bh; y < std::min(img.height, (by + 1) * bh); ++y) {
        for (int x = bx * bw; x < std::min(img.width, (bx + 1) * bw); ++x) {
          const float* p = img.at(y, x);
          for (int c = 0; c < 3; ++c) acc[c] += p[c];
          ++cnt;
        }
      }
      for (double v : acc) out.push_back(cnt ? v / cnt : 0.0);
    }
  }
  return out;
}

OracleReport alignment_report(const Image& img, const SceneSpec& spec) {
  validate_spec(spec);
  if (img.height != kRenderSize || img.width != kRenderSize) {
    throw ShapeError("alignment_oracle: expected " + std::to_string(kRenderSize) + "x" + std::to_string(kRenderSize) +
                     " image, got " + std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  const int cell = kRenderSize / kGridCells;
  const auto& pal = palette();
  OracleReport rep;
  for (const auto& obj : spec.objects) {
    ObjectCheck chk;
    std::vector<std::uint8_t> fg(static_cast<std::size_t>(cell) * cell, 0);
    double sum[3] = {0, 0, 0};
    int n_fg = 0;
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) {
        const float* p = img.at(obj.row * cell + y, obj.col * cell + x);
        double dist2 = 0.0;
        for (int c = 0; c < 3; ++c) dist2 += (1.0 - p[c]) * (1.0 - p[c]);
        if (dist2 > kForegroundDist * kForegroundDist) {
          fg[static_cast<std::size_t>(y) * cell + x] = 1;
          for (int c = 0; c < 3; ++c) sum[c] += p[c];
          ++n_fg;
        }
      }
    }
    chk.present = n_fg >= kPresenceFrac * cell * cell;
    double best_iou = -1.0;
    int best_shape = -1;
    for (int s = 0; s < kNumShapes; ++s) {
      int inter = 0, uni = 0;
      for (int y = 0; y < cell; ++y) {
        for (int x = 0; x < cell; ++x) {
          const bool g = glyph_contains(static_cast<ShapeKind>(s), (x + 0.5) / cell, (y + 0.5) / cell);
          const bool f = fg[static_cast<std::size_t>(y) * cell + x] != 0;
          inter += g && f;
          uni += g || f;
        }
      }
      const double iou = uni ? static_cast<double>(inter) / uni : 0.0;
      if (s == static_cast<int>(obj.shape)) chk.iou = iou;
      if (iou > best_iou) {
        best_iou = iou;
        best_shape = s;
      }
    }
    chk.shape = best_shape == static_cast<int>(obj.shape) && chk.iou >= kShapeIou;
    if (n_fg > 0) {
      double best = 1e300;
      for (int c = 0; c < kNumColors; ++c) {
        const double ref[3] = {pal[static_cast<std::size_t>(c)].r / 255.0, pal[static_cast<std::size_t>(c)].g / 255.0,
                               pal[static_cast<std::size_t>(c)].b / 255.0};
        double d2 = 0.0;
        for (int k = 0; k < 3; ++k) d2 += (sum[k] / n_fg - ref[k]) * (sum[k] / n_fg - ref[k]);
        if (d2 < best) {
          best = d2;
          chk.detected_color = c;
        }
      }
    }
    chk.color = chk.detected_color == obj.color;
    rep.satisfied += chk.present + chk.shape + chk.color;
    rep.total += 3;
    rep.objects.push_back(chk);
  }
  return rep;
}

double alignment_oracle(const Image& img, const SceneSpec& spec) { return alignment_report(img, spec).score(); }

std::string metric_json_line(const std::string& metric, double value, std::int64_t n_a, std::int64_t n_b,
                             const std::string& feature_fn, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["metric"] = metric;
  j["value"] = value;
  j["n_a"] = n_a;
  j["n_b"] = n_b;
  j["feature_fn"] = feature_fn;
  j["seed"] = seed;
  return j.dump();
}

}  // namespace arimg
