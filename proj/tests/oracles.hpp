// Independent reference computations shared by the unit tests and the
// acceptance binary. Each one is written from the definition, not by calling
// the code it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "violet/array.hpp"
#include "violet/autograd.hpp"
#include "violet/synth_data.hpp"

namespace violet::oracle {

/// Indices of the k largest scores (ties to the lower index), ascending.
inline std::vector<int> top_k(const std::vector<double>& scores, int k) {
  std::vector<std::pair<double, int>> v;
  for (std::size_t i = 0; i < scores.size(); ++i) v.emplace_back(-scores[i], static_cast<int>(i));
  std::sort(v.begin(), v.end());
  std::vector<int> out;
  for (int i = 0; i < k; ++i) out.push_back(v[static_cast<std::size_t>(i)].second);
  std::sort(out.begin(), out.end());
  return out;
}

/// Weight of an orientation in a bin whose centre is bin * 180 / bins, as a
/// triangular kernel on the circle of unsigned orientations.
inline double bin_weight(double degrees, int bin, int bins) {
  const double width = 180.0 / bins;
  double d = std::fabs(degrees - bin * width);
  d = std::fmod(d, 180.0);
  d = std::min(d, 180.0 - d);
  return std::max(0.0, 1.0 - d / width);
}

/// Dense HOG map of frame t, computed per pixel from scratch: every pixel
/// rescans its whole cell to build the histogram and its whole patch to get
/// the block norm.
inline std::vector<double> hog_map(const Array4d& f, int t, int patch, int cell = 8, int bins = 9,
                                   double eps = 1e-6) {
  const int h = f.height(), w = f.width();
  auto gray = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return (f(t, y, x, 0) + f(t, y, x, 1) + f(t, y, x, 2)) / 3.0;
  };
  auto gradient = [&](int y, int x, double& mag, double& deg) {
    const double gx = gray(y, x + 1) - gray(y, x - 1);
    const double gy = gray(y + 1, x) - gray(y - 1, x);
    mag = std::hypot(gx, gy);
    deg = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
    while (deg < 0.0) deg += 180.0;
    while (deg >= 180.0) deg -= 180.0;
  };
  auto cell_hist = [&](int cy, int cx) {
    std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
    for (int y = cy * cell; y < (cy + 1) * cell; ++y)
      for (int x = cx * cell; x < (cx + 1) * cell; ++x) {
        double mag, deg;
        gradient(y, x, mag, deg);
        for (int b = 0; b < bins; ++b) hist[static_cast<std::size_t>(b)] += mag * bin_weight(deg, b, bins);
      }
    return hist;
  };
  std::vector<double> out(static_cast<std::size_t>(h * w), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double mag, deg;
      gradient(y, x, mag, deg);
      if (mag == 0.0) continue;
      const int py = y / patch, px = x / patch;
      double sq = 0.0;
      for (int cy = py * patch / cell; cy < (py + 1) * patch / cell; ++cy)
        for (int cx = px * patch / cell; cx < (px + 1) * patch / cell; ++cx)
          for (double v : cell_hist(cy, cx)) sq += v * v;
      const std::vector<double> hist = cell_hist(y / cell, x / cell);
      double v = 0.0;
      for (int b = 0; b < bins; ++b) v += bin_weight(deg, b, bins) * hist[static_cast<std::size_t>(b)];
      out[static_cast<std::size_t>(y * w + x)] = v / std::sqrt(sq + eps * eps);
    }
  return out;
}

/// Nearest centroid by exhaustive scan of all K distances, with the
/// descriptor (4 x 4 grid of channel means) recomputed here.
inline int nearest_centroid(const Array4d& f, int t, int y0, int x0, int patch, const Matrix& centroids) {
  const int sub = patch / 4;
  std::vector<double> d(48, 0.0);
  for (int y = 0; y < patch; ++y)
    for (int x = 0; x < patch; ++x)
      for (int c = 0; c < 3; ++c)
        d[static_cast<std::size_t>(((y / sub) * 4 + x / sub) * 3 + c)] += f(t, y0 + y, x0 + x, c) / (sub * sub);
  std::vector<double> dist;
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    double s = 0.0;
    for (int e = 0; e < 48; ++e) s += (centroids(k, e) - d[static_cast<std::size_t>(e)]) * (centroids(k, e) - d[static_cast<std::size_t>(e)]);
    dist.push_back(s);
  }
  return static_cast<int>(std::min_element(dist.begin(), dist.end()) - dist.begin());
}

/// Index of the nearest object covering pixel (x, y) at cached frame t, or
/// -1 for background. Shapes are evaluated from their definitions.
inline int visible_object(const SceneSpec& s, int x, int y, int t) {
  int best = -1;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    const double left = o.x + o.vx * t, top = o.y + o.vy * t;
    bool inside;
    if (o.shape == Shape::kCircle) {
      const double r = o.width / 2.0;
      const double dx = x + 0.5 - (left + r), dy = y + 0.5 - (top + r);
      inside = dx * dx + dy * dy <= r * r;
    } else {
      inside = x >= left && x < left + o.width && y >= top && y < top + o.height;
    }
    if (inside && (best < 0 || o.depth_rank < s.objects[static_cast<std::size_t>(best)].depth_rank))
      best = static_cast<int>(i);
  }
  return best;
}

inline double depth_at(const SceneSpec& s, int x, int y, int t) {
  const int v = oracle::visible_object(s, x, y, t);
  return v < 0 ? 1.0 : (s.objects[static_cast<std::size_t>(v)].depth_rank - 1) / static_cast<double>(s.num_objects());
}

/// Displacement of the point starting at (x, y) in cached frame `from` after
/// following the visible object's velocity frame by frame up to `to`.
inline std::pair<int, int> tracked_flow(const SceneSpec& s, int x, int y, int from, int to) {
  int px = x, py = y;
  for (int k = from; k < to; ++k) {
    const int v = oracle::visible_object(s, px, py, k);
    if (v < 0) continue;
    px = std::clamp(px + s.objects[static_cast<std::size_t>(v)].vx, 0, s.canvas_size - 1);
    py = std::clamp(py + s.objects[static_cast<std::size_t>(v)].vy, 0, s.canvas_size - 1);
  }
  return {px - x, py - y};
}

}  // namespace violet::oracle
