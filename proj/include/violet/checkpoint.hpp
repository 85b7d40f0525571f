// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/autograd.hpp"
#include "violet/detail/encoding.hpp"
#include "violet/error.hpp"

namespace violet {

/// Checkpoint directory layout:
///   config.json    caller-supplied metadata (model config, hashes, step)
///   manifest.json  [{path, offset, shape}] with byte offsets into params.bin
///   params.bin     float64 little-endian values, row-major, in manifest order
inline void save_params(const ParamStore& params, const nlohmann::json& config,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint8_t> blob;
  blob.reserve(params.num_scalars() * 8);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [path, m] : params) {
    manifest.push_back({{"path", path},
                        {"offset", blob.size()},
                        {"shape", {m.rows(), m.cols()}}});
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::append_f64_le(blob, m.data()[i]);
  }
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  require(static_cast<bool>(bin), ErrorCode::kIo, "cannot write params.bin in " + dir.string());
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  detail::write_text_file((dir / "manifest.json").string(), manifest.dump(1));
  detail::write_text_file((dir / "config.json").string(), config.dump(2));
}

inline ParamStore load_params(const std::filesystem::path& dir) {
  const auto manifest =
      nlohmann::json::parse(detail::read_text_file((dir / "manifest.json").string()));
  const std::string raw = detail::read_text_file((dir / "params.bin").string());
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(raw.data());
  ParamStore out;
  for (const auto& entry : manifest) {
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto rows = entry.at("shape")[0].get<Eigen::Index>();
    const auto cols = entry.at("shape")[1].get<Eigen::Index>();
    require(offset + static_cast<std::size_t>(rows * cols) * 8 <= raw.size(), ErrorCode::kIo,
            "params.bin truncated for " + entry.at("path").get<std::string>());
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = detail::read_f64_le(bytes + offset + static_cast<std::size_t>(i) * 8);
    out.set(entry.at("path").get<std::string>(), std::move(m));
  }
  return out;
}

inline nlohmann::json load_checkpoint_config(const std::filesystem::path& dir) {
  return nlohmann::json::parse(detail::read_text_file((dir / "config.json").string()));
}

}  // namespace violet
