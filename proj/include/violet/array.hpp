// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "violet/error.hpp"

namespace violet {

/// Dense row-major (frames x height x width x channels) array. Used for video
/// frames (3 channels), optical flow (2) and depth (1).
class Array4d {
 public:
  Array4d() = default;
  Array4d(int frames, int height, int width, int channels, double fill = 0.0)
      : shape_{frames, height, width, channels},
        data_(static_cast<std::size_t>(frames) * height * width * channels, fill) {
    require(frames >= 0 && height >= 0 && width >= 0 && channels >= 0,
            ErrorCode::kInvalidArgument, "negative array extent");
  }

  int frames() const { return shape_[0]; }
  int height() const { return shape_[1]; }
  int width() const { return shape_[2]; }
  int channels() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t offset(int t, int y, int x, int c) const {
    return ((static_cast<std::size_t>(t) * shape_[1] + y) * shape_[2] + x) * shape_[3] + c;
  }
  double& operator()(int t, int y, int x, int c) { return data_[offset(t, y, x, c)]; }
  double operator()(int t, int y, int x, int c) const { return data_[offset(t, y, x, c)]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  /// Copies frames `indices` and the spatial window [y0, y0+h) x [x0, x0+w).
  Array4d select(const std::vector<int>& indices, int y0, int x0, int h, int w) const {
    require(y0 >= 0 && x0 >= 0 && y0 + h <= height() && x0 + w <= width(),
            ErrorCode::kInvalidArgument, "crop window outside array");
    Array4d out(static_cast<int>(indices.size()), h, w, channels());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const int t = indices[i];
      require(t >= 0 && t < frames(), ErrorCode::kInvalidArgument, "frame index out of range");
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < channels(); ++c)
            out(static_cast<int>(i), y, x, c) = (*this)(t, y0 + y, x0 + x, c);
    }
    return out;
  }

  friend bool operator==(const Array4d& a, const Array4d& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

}  // namespace violet
