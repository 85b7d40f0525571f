// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "violet/array.hpp"
#include "violet/error.hpp"

namespace violet {

/// Writes frame `t` of an RGB array as binary PPM (P6, 8-bit). Lossless for
/// values on the 1/255 grid, which is all the synthetic palette produces.
inline void write_ppm(const std::string& path, const Array4d& frames, int t) {
  require(frames.channels() == 3, ErrorCode::kInvalidArgument, "PPM needs 3 channels");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path);
  out << "P6\n" << frames.width() << ' ' << frames.height() << "\n255\n";
  for (int y = 0; y < frames.height(); ++y)
    for (int x = 0; x < frames.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(frames(t, y, x, c), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
}

/// Reads a P6 image into frame `t` of `frames` (which must already have the
/// matching height/width).
inline void read_ppm(const std::string& path, Array4d& frames, int t) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path);
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  in.get();
  require(magic == "P6" && maxval == 255, ErrorCode::kIo, "unsupported PPM " + path);
  require(width == frames.width() && height == frames.height(), ErrorCode::kIo,
          "PPM size mismatch in " + path);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int byte = in.get();
        require(byte != EOF, ErrorCode::kIo, "truncated PPM " + path);
        frames(t, y, x, c) = static_cast<double>(byte) / 255.0;
      }
}

}  // namespace violet
