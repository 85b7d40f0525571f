// SPDX-License-Identifier: Apache-2.0
//
// Masked-visual-modeling targets. Every extractor returns one row per masked
// patch in canonical order (frame, patch row, patch column); Flow returns rows
// only for masked patches whose frame has a successor in the sample.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/array.hpp"
#include "violet/autograd.hpp"
#include "violet/checkpoint.hpp"
#include "violet/error.hpp"
#include "violet/masking.hpp"
#include "violet/model.hpp"
#include "violet/rng.hpp"
#include "violet/synth_data.hpp"

namespace violet {

enum class TargetKind { kPixel, kHog, kDepth, kFlow, kVq, kSif, kTvf, kMmf };
enum class LossKind { kL1, kL2, kCrossEntropy };

inline const std::vector<TargetKind>& all_target_kinds() {
  static const std::vector<TargetKind> kinds = {TargetKind::kPixel, TargetKind::kHog,
                                                TargetKind::kDepth, TargetKind::kFlow,
                                                TargetKind::kVq,    TargetKind::kSif,
                                                TargetKind::kTvf,   TargetKind::kMmf};
  return kinds;
}

inline std::string to_string(TargetKind k) {
  switch (k) {
    case TargetKind::kPixel: return "Pixel";
    case TargetKind::kHog: return "HOG";
    case TargetKind::kDepth: return "Depth";
    case TargetKind::kFlow: return "Flow";
    case TargetKind::kVq: return "VQ";
    case TargetKind::kSif: return "SIF";
    case TargetKind::kTvf: return "TVF";
    case TargetKind::kMmf: return "MMF";
  }
  return "?";
}

inline TargetKind target_kind_from_string(const std::string& s) {
  for (TargetKind k : all_target_kinds())
    if (to_string(k) == s) return k;
  throw Error(ErrorCode::kInvalidArgument, "unknown MVM target '" + s + "'");
}

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kL1: return "l1";
    case LossKind::kL2: return "l2";
    case LossKind::kCrossEntropy: return "cross-entropy";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "l1") return LossKind::kL1;
  if (s == "l2") return LossKind::kL2;
  if (s == "cross-entropy") return LossKind::kCrossEntropy;
  throw Error(ErrorCode::kInvalidArgument, "unknown loss kind '" + s + "'");
}

/// VQ is classification; everything else regresses (l1 unless l2 requested).
inline LossKind loss_kind_for(TargetKind kind, LossKind regression = LossKind::kL1) {
  return kind == TargetKind::kVq ? LossKind::kCrossEntropy : regression;
}

struct TargetTensor {
  TargetKind kind = TargetKind::kPixel;
  LossKind loss = LossKind::kL1;
  Matrix values;             // regression rows (empty for VQ)
  std::vector<int> classes;  // VQ ids (empty otherwise)
  std::vector<int> patches;  // flat patch index of each row
  std::string normalization = "none";

  int rows() const { return static_cast<int>(patches.size()); }
};

namespace detail {

inline int patch_size_for(const Array4d& frames, const PatchGrid& grid) {
  require(frames.frames() == grid.frames && grid.rows > 0 && grid.cols > 0 &&
              frames.height() % grid.rows == 0 && frames.width() % grid.cols == 0 &&
              frames.height() / grid.rows == frames.width() / grid.cols,
          ErrorCode::kInvalidArgument, "mask grid does not tile the frames");
  return frames.height() / grid.rows;
}

/// Copies the channel values of patch `flat` (canonical order) into a row.
inline Eigen::RowVectorXd patch_row(const Array4d& a, const PatchGrid& grid, int patch, int flat) {
  const int per_frame = grid.rows * grid.cols;
  const int t = flat / per_frame;
  const int gy = (flat % per_frame) / grid.cols;
  const int gx = flat % grid.cols;
  Eigen::RowVectorXd row(patch * patch * a.channels());
  Eigen::Index k = 0;
  for (int y = 0; y < patch; ++y)
    for (int x = 0; x < patch; ++x)
      for (int c = 0; c < a.channels(); ++c) row(k++) = a(t, gy * patch + y, gx * patch + x, c);
  return row;
}

inline TargetTensor dense_patch_target(TargetKind kind, const Array4d& a, const PatchMask& mask) {
  const int patch = patch_size_for(a, mask.grid);
  TargetTensor out;
  out.kind = kind;
  out.patches = mask.masked_indices();
  out.values.resize(static_cast<Eigen::Index>(out.patches.size()), patch * patch * a.channels());
  for (std::size_t i = 0; i < out.patches.size(); ++i)
    out.values.row(static_cast<Eigen::Index>(i)) = patch_row(a, mask.grid, patch, out.patches[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pixel

/// Flattened (row, column, channel) patch values. Synthetic frames are already
/// in [0, 1], so no further normalisation is applied.
inline TargetTensor target_pixel(const Array4d& frames, const PatchMask& mask) {
  TargetTensor out = detail::dense_patch_target(TargetKind::kPixel, frames, mask);
  out.normalization = "unit-range";
  return out;
}

// ---------------------------------------------------------------------------
// HOG

struct HogParams {
  int bins = 9;   // unsigned orientations over [0, 180)
  int cell = 8;   // cell side in pixels
  double eps = 1e-6;
};

/// Per-pixel gradient of the channel-mean image via centered differences with
/// clamped borders.
struct GradientField {
  Matrix magnitude;
  Matrix angle;  // degrees in [0, 180)
};

inline GradientField image_gradients(const Array4d& frames, int t) {
  const int h = frames.height(), w = frames.width();
  Matrix gray(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int c = 0; c < frames.channels(); ++c) s += frames(t, y, x, c);
      gray(y, x) = s / frames.channels();
    }
  GradientField g{Matrix(h, w), Matrix(h, w)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = gray(y, std::min(x + 1, w - 1)) - gray(y, std::max(x - 1, 0));
      const double gy = gray(std::min(y + 1, h - 1), x) - gray(std::max(y - 1, 0), x);
      g.magnitude(y, x) = std::sqrt(gx * gx + gy * gy);
      double deg = std::atan2(gy, gx) * (180.0 / 3.14159265358979323846);
      deg = std::fmod(deg, 180.0);
      if (deg < 0.0) deg += 180.0;
      if (deg >= 180.0) deg = 0.0;
      g.angle(y, x) = deg;
    }
  return g;
}

/// Bilinear split of an orientation between the two nearest bin centres
/// (centres at 0, 180/bins, ...; bin bins-1 wraps to bin 0).
struct BinSplit {
  int lo = 0, hi = 0;
  double w_lo = 1.0, w_hi = 0.0;
};

inline BinSplit split_orientation(double degrees, int bins) {
  const double pos = degrees / (180.0 / bins);
  const double base = std::floor(pos);
  BinSplit s;
  s.lo = static_cast<int>(base) % bins;
  s.hi = (s.lo + 1) % bins;
  s.w_hi = pos - base;
  s.w_lo = 1.0 - s.w_hi;
  return s;
}

/// Magnitude-weighted orientation histograms, one row per cell (cell rows
/// major), before normalisation.
inline Matrix hog_cell_histograms(const GradientField& g, const HogParams& p) {
  const int h = static_cast<int>(g.magnitude.rows()), w = static_cast<int>(g.magnitude.cols());
  require(h % p.cell == 0 && w % p.cell == 0, ErrorCode::kInvalidArgument,
          "image size not divisible by HOG cell size");
  const int ch = h / p.cell, cw = w / p.cell;
  Matrix hist = Matrix::Zero(ch * cw, p.bins);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const BinSplit s = split_orientation(g.angle(y, x), p.bins);
      const int cell = (y / p.cell) * cw + x / p.cell;
      hist(cell, s.lo) += g.magnitude(y, x) * s.w_lo;
      hist(cell, s.hi) += g.magnitude(y, x) * s.w_hi;
    }
  return hist;
}

/// L2 block normalisation where a block is the set of cells inside one
/// patch: v / sqrt(|block|^2 + eps^2).
inline Matrix hog_block_normalize(const Matrix& hist, int cells_h, int cells_w, int cells_per_patch,
                                  double eps) {
  Matrix out = hist;
  for (int by = 0; by < cells_h; by += cells_per_patch)
    for (int bx = 0; bx < cells_w; bx += cells_per_patch) {
      double sq = 0.0;
      for (int y = by; y < by + cells_per_patch; ++y)
        for (int x = bx; x < bx + cells_per_patch; ++x) sq += hist.row(y * cells_w + x).squaredNorm();
      const double scale = 1.0 / std::sqrt(sq + eps * eps);
      for (int y = by; y < by + cells_per_patch; ++y)
        for (int x = bx; x < bx + cells_per_patch; ++x) out.row(y * cells_w + x) *= scale;
    }
  return out;
}

/// Dense single-channel HOG map for frame t: each pixel carries its cell's
/// normalised histogram sampled at the pixel's own orientation with the same
/// bilinear weights used for voting; zero-gradient pixels are 0.
inline Matrix hog_dense_map(const Array4d& frames, int t, int patch, const HogParams& p) {
  require(patch % p.cell == 0, ErrorCode::kInvalidArgument,
          "patch size must be divisible by HOG cell size");
  const GradientField g = image_gradients(frames, t);
  const int cw = frames.width() / p.cell;
  const int chh = frames.height() / p.cell;
  const Matrix hist = hog_block_normalize(hog_cell_histograms(g, p), chh, cw, patch / p.cell, p.eps);
  Matrix map = Matrix::Zero(frames.height(), frames.width());
  for (int y = 0; y < frames.height(); ++y)
    for (int x = 0; x < frames.width(); ++x) {
      if (g.magnitude(y, x) == 0.0) continue;
      const BinSplit s = split_orientation(g.angle(y, x), p.bins);
      const int cell = (y / p.cell) * cw + x / p.cell;
      map(y, x) = s.w_lo * hist(cell, s.lo) + s.w_hi * hist(cell, s.hi);
    }
  return map;
}

inline TargetTensor target_hog(const Array4d& frames, const PatchMask& mask, const HogParams& p = {}) {
  const int patch = detail::patch_size_for(frames, mask.grid);
  Array4d dense(frames.frames(), frames.height(), frames.width(), 1);
  for (int t = 0; t < frames.frames(); ++t) {
    const Matrix map = hog_dense_map(frames, t, patch, p);
    for (int y = 0; y < frames.height(); ++y)
      for (int x = 0; x < frames.width(); ++x) dense(t, y, x, 0) = map(y, x);
  }
  TargetTensor out = detail::dense_patch_target(TargetKind::kHog, dense, mask);
  out.normalization = "hog-block-l2";
  return out;
}

// ---------------------------------------------------------------------------
// Depth and Flow (exact ground truth from the generator)

inline TargetTensor target_depth(const FrameSample& sample, const PatchMask& mask) {
  require(!sample.depth.empty(), ErrorCode::kUnsupportedTarget,
          "Depth target needs depth annotations");
  TargetTensor out = detail::dense_patch_target(TargetKind::kDepth, sample.depth, mask);
  out.normalization = "rank-linear";
  return out;
}

/// Displacement of every pixel of the crop window from cached frame `from` to
/// cached frame `to`, composing per-step flow along each pixel's track.
inline Array4d accumulated_flow(const AnnotatedClip& clip, int from, int to, int crop_y, int crop_x,
                                int crop) {
  require(from < to && to < clip.frames.frames(), ErrorCode::kInvalidArgument,
          "flow interval must be increasing and inside the cache");
  const int n = clip.gt_flow.height(), w = clip.gt_flow.width();
  Array4d out(1, crop, crop, 2);
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x) {
      int px = crop_x + x, py = crop_y + y;
      for (int k = from; k < to; ++k) {
        const int dx = static_cast<int>(clip.gt_flow(k, py, px, 0));
        const int dy = static_cast<int>(clip.gt_flow(k, py, px, 1));
        px = std::clamp(px + dx, 0, w - 1);
        py = std::clamp(py + dy, 0, n - 1);
      }
      out(0, y, x, 0) = px - (crop_x + x);
      out(0, y, x, 1) = py - (crop_y + y);
    }
  return out;
}

/// Row per masked patch at sample position t < T-1: the flow between the
/// cached frames underlying samples t and t+1.
inline TargetTensor target_flow(const AnnotatedClip& clip, const FrameSample& sample,
                                const PatchMask& mask) {
  const int frames = static_cast<int>(sample.indices.size());
  require(frames >= 2, ErrorCode::kUnsupportedTarget, "Flow target needs at least two frames");
  require(clip.gt_flow.frames() > 0, ErrorCode::kUnsupportedTarget,
          "Flow target needs flow annotations");
  require(mask.grid.frames == frames, ErrorCode::kInvalidArgument, "mask grid frame mismatch");
  Array4d dense(frames, sample.crop, sample.crop, 2, 0.0);
  for (int t = 0; t + 1 < frames; ++t) {
    const Array4d f = accumulated_flow(clip, sample.indices[static_cast<std::size_t>(t)],
                                       sample.indices[static_cast<std::size_t>(t) + 1],
                                       sample.crop_y, sample.crop_x, sample.crop);
    for (int y = 0; y < sample.crop; ++y)
      for (int x = 0; x < sample.crop; ++x)
        for (int c = 0; c < 2; ++c) dense(t, y, x, c) = f(0, y, x, c);
  }
  PatchMask restricted = mask;
  const int per_frame = mask.grid.rows * mask.grid.cols;
  for (int i = (frames - 1) * per_frame; i < mask.grid.size(); ++i)
    restricted.bits[static_cast<std::size_t>(i)] = false;
  TargetTensor out = detail::dense_patch_target(TargetKind::kFlow, dense, restricted);
  out.normalization = "pixels";
  return out;
}

// ---------------------------------------------------------------------------
// VQ: k-means codebook over downsampled patch descriptors

/// 4 x 4 grid of per-channel means (48 values), ordered (sub-row, sub-col, channel).
inline Eigen::RowVectorXd patch_descriptor(const Array4d& frames, int t, int y0, int x0, int patch) {
  require(patch % 4 == 0, ErrorCode::kInvalidArgument, "VQ descriptors need patch size % 4 == 0");
  const int sub = patch / 4;
  Eigen::RowVectorXd d = Eigen::RowVectorXd::Zero(48);
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx)
      for (int c = 0; c < 3; ++c) {
        double s = 0.0;
        for (int y = 0; y < sub; ++y)
          for (int x = 0; x < sub; ++x) s += frames(t, y0 + sy * sub + y, x0 + sx * sub + x, c);
        d((sy * 4 + sx) * 3 + c) = s / (sub * sub);
      }
  return d;
}

/// Descriptor of every patch of every frame, canonical order.
inline Matrix patch_descriptors(const Array4d& frames, int patch) {
  const int gh = frames.height() / patch, gw = frames.width() / patch;
  Matrix out(static_cast<Eigen::Index>(frames.frames()) * gh * gw, 48);
  Eigen::Index r = 0;
  for (int t = 0; t < frames.frames(); ++t)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) out.row(r++) = patch_descriptor(frames, t, gy * patch, gx * patch, patch);
  return out;
}

class Codebook {
 public:
  Codebook() = default;
  explicit Codebook(Matrix centroids) : centroids_(std::move(centroids)) {}

  int size() const { return static_cast<int>(centroids_.rows()); }
  int dim() const { return static_cast<int>(centroids_.cols()); }
  const Matrix& centroids() const { return centroids_; }

  /// Nearest centroid by squared Euclidean distance; ties to the lower id.
  int nearest(const Eigen::RowVectorXd& d) const {
    int best = 0;
    double best_d = (centroids_.row(0) - d).squaredNorm();
    for (int k = 1; k < size(); ++k) {
      const double dist = (centroids_.row(k) - d).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    return best;
  }

  /// Patch whose descriptor equals centroid `id` (each sub-block filled
  /// with its mean colour).
  Array4d reconstruct(int id, int patch) const {
    Array4d out(1, patch, patch, 3);
    const int sub = patch / 4;
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x)
        for (int c = 0; c < 3; ++c) out(0, y, x, c) = centroids_(id, ((y / sub) * 4 + x / sub) * 3 + c);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index k = 0; k < centroids_.rows(); ++k) {
      std::vector<double> row(centroids_.row(k).data(), centroids_.row(k).data() + centroids_.cols());
      rows.push_back(row);
    }
    return {{"K", size()}, {"descriptor_dim", dim()}, {"centroids", rows}};
  }

  static Codebook from_json(const nlohmann::json& j) {
    const int k = j.at("K").get<int>(), d = j.at("descriptor_dim").get<int>();
    Matrix c(k, d);
    for (int i = 0; i < k; ++i)
      for (int e = 0; e < d; ++e) c(i, e) = j.at("centroids")[static_cast<std::size_t>(i)][static_cast<std::size_t>(e)].get<double>();
    return Codebook(std::move(c));
  }

 private:
  Matrix centroids_;
};

/// Lloyd's k-means for a fixed number of iterations from K distinct seeded
/// samples. Empty clusters keep their previous centroid.
inline Codebook build_codebook(const Matrix& descriptors, int k, std::uint64_t seed,
                               int iterations = 20) {
  require(k >= 2, ErrorCode::kInvalidArgument, "codebook needs K >= 2");
  require(descriptors.rows() > 0, ErrorCode::kInvalidArgument, "codebook sample is empty");
  std::vector<Eigen::Index> distinct;
  {
    std::set<std::vector<double>> seen;
    for (Eigen::Index i = 0; i < descriptors.rows(); ++i) {
      std::vector<double> key(descriptors.row(i).data(), descriptors.row(i).data() + descriptors.cols());
      if (seen.insert(key).second) distinct.push_back(i);
    }
  }
  require(static_cast<Eigen::Index>(distinct.size()) >= k, ErrorCode::kDegenerateCodebook,
          "K = " + std::to_string(k) + " exceeds the " + std::to_string(distinct.size()) +
              " distinct descriptors");
  Rng rng(seed);
  shuffle(distinct, rng);
  Matrix centroids(k, descriptors.cols());
  for (int i = 0; i < k; ++i) centroids.row(i) = descriptors.row(distinct[static_cast<std::size_t>(i)]);
  Codebook book(centroids);
  for (int it = 0; it < iterations; ++it) {
    Matrix sums = Matrix::Zero(k, descriptors.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < descriptors.rows(); ++i) {
      const int c = book.nearest(descriptors.row(i));
      sums.row(c) += descriptors.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    book = Codebook(centroids);
  }
  return book;
}

/// One codebook id per masked patch.
inline TargetTensor quantize(const Array4d& frames, const PatchMask& mask, const Codebook& book) {
  const int patch = detail::patch_size_for(frames, mask.grid);
  require(book.dim() == 48, ErrorCode::kInvalidArgument, "codebook descriptor dim must be 48");
  TargetTensor out;
  out.kind = TargetKind::kVq;
  out.loss = LossKind::kCrossEntropy;
  out.patches = mask.masked_indices();
  const int per_frame = mask.grid.rows * mask.grid.cols;
  for (int flat : out.patches) {
    const int t = flat / per_frame;
    const int gy = (flat % per_frame) / mask.grid.cols, gx = flat % mask.grid.cols;
    out.classes.push_back(book.nearest(patch_descriptor(frames, t, gy * patch, gx * patch, patch)));
  }
  out.normalization = "codebook-K" + std::to_string(book.size());
  return out;
}

// ---------------------------------------------------------------------------
// Frozen teachers (SIF / TVF / MMF stand-ins)

enum class TeacherArity { kImage, kVideo, kMultimodalImage };

inline std::string to_string(TeacherArity a) {
  switch (a) {
    case TeacherArity::kImage: return "image";
    case TeacherArity::kVideo: return "video";
    case TeacherArity::kMultimodalImage: return "multimodal-image";
  }
  return "?";
}

inline TeacherArity teacher_arity_from_string(const std::string& s) {
  if (s == "image") return TeacherArity::kImage;
  if (s == "video") return TeacherArity::kVideo;
  if (s == "multimodal-image") return TeacherArity::kMultimodalImage;
  throw Error(ErrorCode::kInvalidTeacher, "unknown teacher arity '" + s + "'");
}

inline TeacherArity teacher_arity_for(TargetKind kind) {
  switch (kind) {
    case TargetKind::kSif: return TeacherArity::kImage;
    case TargetKind::kTvf: return TeacherArity::kVideo;
    case TargetKind::kMmf: return TeacherArity::kMultimodalImage;
    default: break;
  }
  throw Error(ErrorCode::kInvalidArgument, to_string(kind) + " is not a teacher target");
}

/// Small frozen network mapping frames to one feature vector per patch.
///   image:            f = W2 tanh(W1 p + b1 + C mean_frame(tanh(W1 p + b1))) + b2
///   multimodal-image: same with a sine activation in place of tanh
///   video:            cubes of two consecutive sampled frames; the cube
///                     feature is broadcast to both member patches
/// Evaluated with plain Eigen, outside any Tape, so it never sees gradients.
class Teacher {
 public:
  Teacher() = default;
  Teacher(TeacherArity arity, int patch, int feature_dim, int hidden, ParamStore params)
      : arity_(arity), patch_(patch), feature_dim_(feature_dim), hidden_(hidden),
        params_(std::move(params)) {}

  static Teacher make(TeacherArity arity, int patch, int feature_dim, std::uint64_t seed,
                      int hidden = 32) {
    const int in = patch * patch * 3 * (arity == TeacherArity::kVideo ? 2 : 1);
    ParamStore p;
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    p.set("teacher.w1", detail::truncated_normal(in, hidden, 2.0 * s1, derive_seed(seed, 1)));
    p.set("teacher.b1", detail::truncated_normal(1, hidden, 0.5, derive_seed(seed, 2)));
    p.set("teacher.context", detail::truncated_normal(hidden, hidden, s2, derive_seed(seed, 3)));
    p.set("teacher.w2", detail::truncated_normal(hidden, feature_dim, s2, derive_seed(seed, 4)));
    p.set("teacher.b2", detail::truncated_normal(1, feature_dim, 0.1, derive_seed(seed, 5)));
    return Teacher(arity, patch, feature_dim, hidden, std::move(p));
  }

  TeacherArity arity() const { return arity_; }
  int patch() const { return patch_; }
  int feature_dim() const { return feature_dim_; }
  const ParamStore& params() const { return params_; }
  ParamStore& mutable_params() { return params_; }

  /// Raw features, one row per patch in canonical order.
  Matrix features(const Array4d& frames) const {
    require(frames.height() % patch_ == 0 && frames.width() % patch_ == 0,
            ErrorCode::kInvalidTeacher, "teacher patch size does not tile the frames");
    const Matrix patches = patchify(frames, patch_);
    const int per_frame = (frames.height() / patch_) * (frames.width() / patch_);
    const int t_count = frames.frames();
    const Matrix& w1 = params_.at("teacher.w1");
    const Matrix& b1 = params_.at("teacher.b1");
    const Matrix& ctx = params_.at("teacher.context");
    const Matrix& w2 = params_.at("teacher.w2");
    const Matrix& b2 = params_.at("teacher.b2");
    Matrix out(patches.rows(), feature_dim_);

    if (arity_ == TeacherArity::kVideo) {
      for (int t0 = 0; t0 < t_count; t0 += 2) {
        const int t1 = std::min(t0 + 1, t_count - 1);
        Matrix cube(per_frame, patches.cols() * 2);
        cube << patches.middleRows(t0 * per_frame, per_frame), patches.middleRows(t1 * per_frame, per_frame);
        Matrix h = ((cube * w1).rowwise() + b1.row(0)).array().tanh().matrix();
        const Eigen::RowVectorXd mean = h.colwise().mean();
        h = (h.rowwise() + (mean * ctx).array().tanh().matrix()).eval();
        const Matrix f = (h * w2).rowwise() + b2.row(0);
        out.middleRows(t0 * per_frame, per_frame) = f;
        if (t1 != t0) out.middleRows(t1 * per_frame, per_frame) = f;
      }
      return out;
    }
    for (int t = 0; t < t_count; ++t) {
      const Matrix frame = patches.middleRows(t * per_frame, per_frame);
      Matrix pre = (frame * w1).rowwise() + b1.row(0);
      Matrix h = arity_ == TeacherArity::kImage ? Matrix(pre.array().tanh().matrix())
                                                : Matrix(pre.array().sin().matrix());
      const Eigen::RowVectorXd mean = h.colwise().mean();
      h = (h.rowwise() + (mean * ctx).array().tanh().matrix()).eval();
      out.middleRows(t * per_frame, per_frame) = (h * w2).rowwise() + b2.row(0);
    }
    return out;
  }

  nlohmann::json meta() const {
    return {{"arity", to_string(arity_)}, {"patch", patch_}, {"feature_dim", feature_dim_},
            {"hidden", hidden_}};
  }

  void save(const std::filesystem::path& dir) const { save_params(params_, {{"teacher", meta()}}, dir); }

  static Teacher load(const std::filesystem::path& dir) {
    const auto cfg = load_checkpoint_config(dir).at("teacher");
    return Teacher(teacher_arity_from_string(cfg.at("arity").get<std::string>()),
                   cfg.at("patch").get<int>(), cfg.at("feature_dim").get<int>(),
                   cfg.at("hidden").get<int>(), load_params(dir));
  }

 private:
  TeacherArity arity_ = TeacherArity::kImage;
  int patch_ = 16;
  int feature_dim_ = 32;
  int hidden_ = 32;
  ParamStore params_;
};

/// Per-row standardisation (mean 0, population variance 1 across channels).
inline Matrix standardize_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mean = m.row(i).mean();
    const double var = (m.row(i).array() - mean).square().mean();
    require(var > 1e-12, ErrorCode::kDegenerateTarget,
            "teacher feature row " + std::to_string(i) + " has zero variance");
    out.row(i) = (m.row(i).array() - mean) / std::sqrt(var);
  }
  return out;
}

inline TargetTensor target_teacher(const Array4d& frames, const PatchMask& mask,
                                   const Teacher& teacher, TargetKind kind) {
  const int patch = detail::patch_size_for(frames, mask.grid);
  require(teacher.arity() == teacher_arity_for(kind), ErrorCode::kInvalidTeacher,
          to_string(kind) + " needs a " + to_string(teacher_arity_for(kind)) + " teacher, got " +
              to_string(teacher.arity()));
  require(teacher.patch() == patch, ErrorCode::kInvalidTeacher,
          "teacher grid (patch " + std::to_string(teacher.patch()) +
              ") does not match the patch grid (patch " + std::to_string(patch) + ")");
  const Matrix feats = teacher.features(frames);
  TargetTensor out;
  out.kind = kind;
  out.patches = mask.masked_indices();
  Matrix rows(static_cast<Eigen::Index>(out.patches.size()), teacher.feature_dim());
  for (std::size_t i = 0; i < out.patches.size(); ++i)
    rows.row(static_cast<Eigen::Index>(i)) = feats.row(out.patches[i]);
  out.values = standardize_rows(rows);
  out.normalization = "row-standardized";
  return out;
}

// ---------------------------------------------------------------------------
// Uniform dispatch

/// Everything an extractor may need for one clip. Pointers are optional; a
/// missing resource raises unsupported-target for the kinds that need it.
struct TargetSources {
  const AnnotatedClip* clip = nullptr;
  const FrameSample* sample = nullptr;
  const Codebook* codebook = nullptr;
  const Teacher* sif = nullptr;
  const Teacher* tvf = nullptr;
  const Teacher* mmf = nullptr;
  HogParams hog;
};

inline int target_dim(TargetKind kind, int patch, int codebook_size = 64, int teacher_dim = 32) {
  switch (kind) {
    case TargetKind::kPixel: return patch * patch * 3;
    case TargetKind::kHog:
    case TargetKind::kDepth: return patch * patch;
    case TargetKind::kFlow: return patch * patch * 2;
    case TargetKind::kVq: return codebook_size;
    case TargetKind::kSif:
    case TargetKind::kTvf:
    case TargetKind::kMmf: return teacher_dim;
  }
  return 0;
}

inline TargetTensor extract_target(TargetKind kind, const TargetSources& src, const PatchMask& mask,
                                   LossKind regression = LossKind::kL1) {
  require(src.sample != nullptr, ErrorCode::kInvalidArgument, "target extraction needs a sample");
  const Array4d& frames = src.sample->frames;
  auto need = [&](const void* p, const char* what) {
    require(p != nullptr, ErrorCode::kUnsupportedTarget, to_string(kind) + " target needs " + what);
  };
  TargetTensor out;
  switch (kind) {
    case TargetKind::kPixel: out = target_pixel(frames, mask); break;
    case TargetKind::kHog: out = target_hog(frames, mask, src.hog); break;
    case TargetKind::kDepth: out = target_depth(*src.sample, mask); break;
    case TargetKind::kFlow:
      need(src.clip, "clip annotations");
      out = target_flow(*src.clip, *src.sample, mask);
      break;
    case TargetKind::kVq:
      need(src.codebook, "a codebook");
      out = quantize(frames, mask, *src.codebook);
      break;
    case TargetKind::kSif:
      need(src.sif, "an image teacher");
      out = target_teacher(frames, mask, *src.sif, kind);
      break;
    case TargetKind::kTvf:
      need(src.tvf, "a video teacher");
      out = target_teacher(frames, mask, *src.tvf, kind);
      break;
    case TargetKind::kMmf:
      need(src.mmf, "a multimodal teacher");
      out = target_teacher(frames, mask, *src.mmf, kind);
      break;
  }
  out.loss = loss_kind_for(kind, regression);
  return out;
}

}  // namespace violet
