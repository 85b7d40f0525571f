// SPDX-License-Identifier: Apache-2.0
//
// Patch masking strategies for masked visual modeling and token corruption
// for masked language modeling.
//
//   RM  random masking: exactly ceil(p_m * N) patches, uniform without replacement.
//   BM  blockwise masking: spatio-temporal cuboids until more than p_m is masked.
//   AM  attended masking: top ceil(p_m * N) patches / tokens by CLS attention,
//       ranked per modality. Needs an extra intact forward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/error.hpp"
#include "violet/rng.hpp"
#include "violet/synth_data.hpp"

namespace violet {

enum class MaskStrategy { kRandom, kBlockwise, kAttended };

inline std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kRandom: return "RM";
    case MaskStrategy::kBlockwise: return "BM";
    case MaskStrategy::kAttended: return "AM";
  }
  return "?";
}

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "RM") return MaskStrategy::kRandom;
  if (s == "BM") return MaskStrategy::kBlockwise;
  if (s == "AM") return MaskStrategy::kAttended;
  throw Error(ErrorCode::kInvalidArgument, "unknown masking strategy '" + s + "'");
}

struct PatchGrid {
  int frames = 1;
  int rows = 1;
  int cols = 1;

  int size() const { return frames * rows * cols; }
  int flat(int t, int r, int c) const { return (t * rows + r) * cols + c; }
  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

/// Cuboid of patches: `frames` consecutive frames starting at t, `rows` x
/// `cols` patches anchored at (r, c).
struct MaskBlock {
  int t = 0, r = 0, c = 0;
  int frames = 1, rows = 1, cols = 1;

  int size() const { return frames * rows * cols; }
  friend bool operator==(const MaskBlock&, const MaskBlock&) = default;
};

struct PatchMask {
  PatchGrid grid;
  std::vector<bool> bits;  // canonical flat order
  MaskStrategy strategy = MaskStrategy::kRandom;
  std::uint64_t seed = 0;
  std::vector<MaskBlock> blocks;  // BM provenance, in sampling order

  int count() const { return static_cast<int>(std::count(bits.begin(), bits.end(), true)); }
  double realized_ratio() const {
    return bits.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(bits.size());
  }
  std::vector<int> masked_indices() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i]) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline PatchMask empty_mask(PatchGrid grid) {
  PatchMask m;
  m.grid = grid;
  m.bits.assign(static_cast<std::size_t>(grid.size()), false);
  return m;
}

/// ceil(p * n), tolerant of binary rounding in the product (0.3 * 10 must be 3).
inline int ratio_count(double p, int n) {
  const double raw = p * static_cast<double>(n);
  return std::clamp(static_cast<int>(std::ceil(raw - 1e-9)), 0, n);
}

namespace detail {
inline void check_ratio(double p_m) {
  require(p_m > 0.0 && p_m < 1.0, ErrorCode::kInvalidArgument,
          "masking ratio must lie in (0, 1), got " + std::to_string(p_m));
}
}  // namespace detail

inline PatchMask random_mask(PatchGrid grid, double p_m, std::uint64_t seed) {
  detail::check_ratio(p_m);
  require(grid.size() > 0, ErrorCode::kInvalidArgument, "empty patch grid");
  PatchMask m = empty_mask(grid);
  m.strategy = MaskStrategy::kRandom;
  m.seed = seed;
  Rng rng(seed);
  for (int i : sample_without_replacement(grid.size(), ratio_count(p_m, grid.size()), rng))
    m.bits[static_cast<std::size_t>(i)] = true;
  return m;
}

/// Largest cuboid BM can sample: min(3, extent) along each axis.
inline int max_block_size(PatchGrid grid) {
  return std::min(3, grid.frames) * std::min(3, grid.rows) * std::min(3, grid.cols);
}

inline void apply_block(PatchMask& m, const MaskBlock& b) {
  for (int t = b.t; t < b.t + b.frames; ++t)
    for (int r = b.r; r < b.r + b.rows; ++r)
      for (int c = b.c; c < b.c + b.cols; ++c) m.bits[static_cast<std::size_t>(m.grid.flat(t, r, c))] = true;
}

/// Repeatedly samples a cuboid (size uniform on 1..min(3, extent) per axis,
/// anchor uniform among positions where it fits) until the masked fraction
/// strictly exceeds p_m. Every sampled block is kept in `blocks`.
inline PatchMask blockwise_mask(PatchGrid grid, double p_m, std::uint64_t seed) {
  detail::check_ratio(p_m);
  require(grid.size() > 0, ErrorCode::kInvalidArgument, "empty patch grid");
  PatchMask m = empty_mask(grid);
  m.strategy = MaskStrategy::kBlockwise;
  m.seed = seed;
  Rng rng(seed);
  int masked = 0;
  while (static_cast<double>(masked) / static_cast<double>(grid.size()) <= p_m) {
    MaskBlock b;
    b.frames = static_cast<int>(uniform_int(rng, 1, std::min(3, grid.frames)));
    b.rows = static_cast<int>(uniform_int(rng, 1, std::min(3, grid.rows)));
    b.cols = static_cast<int>(uniform_int(rng, 1, std::min(3, grid.cols)));
    b.t = static_cast<int>(uniform_int(rng, 0, grid.frames - b.frames));
    b.r = static_cast<int>(uniform_int(rng, 0, grid.rows - b.rows));
    b.c = static_cast<int>(uniform_int(rng, 0, grid.cols - b.cols));
    apply_block(m, b);
    m.blocks.push_back(b);
    masked = m.count();
  }
  return m;
}

/// Indices of the `k` largest scores; ties go to the lower index.
inline std::vector<int> top_k_indices(const std::vector<double>& scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(order.size()))));
  std::sort(order.begin(), order.end());
  return order;
}

struct AttendedMask {
  PatchMask patches;
  std::vector<bool> tokens;
};

/// Attended masking from an intact-pass attention trace; video and text are
/// ranked separately.
inline AttendedMask attended_mask(PatchGrid grid, const std::vector<double>& video_scores,
                                  const std::vector<double>& text_scores, double p_m) {
  detail::check_ratio(p_m);
  require(static_cast<int>(video_scores.size()) == grid.size(), ErrorCode::kInvalidArgument,
          "video score count does not match patch grid");
  for (double s : video_scores)
    require(s >= 0.0, ErrorCode::kInvalidArgument, "attention scores must be nonnegative");
  for (double s : text_scores)
    require(s >= 0.0, ErrorCode::kInvalidArgument, "attention scores must be nonnegative");
  AttendedMask out;
  out.patches = empty_mask(grid);
  out.patches.strategy = MaskStrategy::kAttended;
  for (int i : top_k_indices(video_scores, ratio_count(p_m, grid.size())))
    out.patches.bits[static_cast<std::size_t>(i)] = true;
  out.tokens.assign(text_scores.size(), false);
  for (int i : top_k_indices(text_scores, ratio_count(p_m, static_cast<int>(text_scores.size()))))
    out.tokens[static_cast<std::size_t>(i)] = true;
  return out;
}

/// One strategy per batch element, i.i.d. uniform over `strategies`.
inline std::vector<MaskStrategy> mix_strategies(const std::vector<MaskStrategy>& strategies,
                                                int batch_size, std::uint64_t seed) {
  require(!strategies.empty(), ErrorCode::kInvalidArgument, "strategy list is empty");
  Rng rng(seed);
  std::vector<MaskStrategy> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i)
    out.push_back(strategies[static_cast<std::size_t>(
        uniform_int(rng, 0, static_cast<std::int64_t>(strategies.size()) - 1))]);
  return out;
}

// ---------------------------------------------------------------------------
// MLM corruption

enum class Replacement : std::uint8_t { kNone, kMaskToken, kRandomToken, kKeep };

struct MlmCorruption {
  static constexpr int kNoLabel = -1;

  std::vector<int> tokens;             // corrupted input ids
  std::vector<int> labels;             // original id where selected, else kNoLabel
  std::vector<bool> mask;              // selected positions
  std::vector<Replacement> replaced;   // which rule was applied

  int count() const { return static_cast<int>(std::count(mask.begin(), mask.end(), true)); }
  std::vector<int> positions() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(static_cast<int>(i));
    return out;
  }
  std::vector<int> target_ids() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) out.push_back(labels[i]);
    return out;
  }
};

/// Applies the 80/10/10 rule at the flagged positions: [MASK], a random
/// non-special token, or the original token (which still carries a label).
inline MlmCorruption corrupt_positions(const std::vector<int>& tokens,
                                       const std::vector<bool>& selected, int vocab_size, Rng& rng) {
  require(selected.size() == tokens.size(), ErrorCode::kInvalidArgument,
          "selection mask length mismatch");
  require(vocab_size > Vocabulary::kNumSpecial, ErrorCode::kInvalidArgument,
          "vocabulary has no regular tokens");
  MlmCorruption out;
  out.tokens = tokens;
  out.labels.assign(tokens.size(), MlmCorruption::kNoLabel);
  out.mask = selected;
  out.replaced.assign(tokens.size(), Replacement::kNone);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!selected[i]) continue;
    out.labels[i] = tokens[i];
    const double u = uniform_unit(rng);
    if (u < 0.8) {
      out.tokens[i] = Vocabulary::kMask;
      out.replaced[i] = Replacement::kMaskToken;
    } else if (u < 0.9) {
      out.tokens[i] = static_cast<int>(uniform_int(rng, Vocabulary::kNumSpecial, vocab_size - 1));
      out.replaced[i] = Replacement::kRandomToken;
    } else {
      out.replaced[i] = Replacement::kKeep;
    }
  }
  return out;
}

/// Independent Bernoulli(ratio) selection over non-special tokens, then the
/// 80/10/10 replacement rule. `extra_eligible` lets captioning also corrupt
/// its [SEP] terminator.
inline MlmCorruption mlm_corrupt(const std::vector<int>& tokens, int vocab_size,
                                 std::uint64_t seed, double ratio = 0.15,
                                 int extra_eligible = -1) {
  require(ratio >= 0.0 && ratio <= 1.0, ErrorCode::kInvalidArgument,
          "corruption ratio must lie in [0, 1]");
  Rng rng(seed);
  std::vector<bool> selected(tokens.size(), false);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const bool eligible = !Vocabulary::is_special(tokens[i]) || tokens[i] == extra_eligible;
    // Draw even for ineligible positions so selections stay aligned by index.
    const double u = uniform_unit(rng);
    selected[i] = eligible && u < ratio;
  }
  return corrupt_positions(tokens, selected, vocab_size, rng);
}

// ---------------------------------------------------------------------------
// Serialization: one JSON header line, then the bitset (LSB-first bytes).

inline std::string serialize_mask(const PatchMask& m) {
  std::vector<std::uint8_t> bytes((m.bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    if (m.bits[i]) bytes[i / 8] = static_cast<std::uint8_t>(bytes[i / 8] | (1u << (i % 8)));
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : m.blocks) blocks.push_back({b.t, b.r, b.c, b.frames, b.rows, b.cols});
  const nlohmann::json header = {{"grid", {m.grid.frames, m.grid.rows, m.grid.cols}},
                                 {"strategy", to_string(m.strategy)},
                                 {"seed", m.seed},
                                 {"count", m.count()},
                                 {"bytes", bytes.size()},
                                 {"blocks", blocks}};
  std::string out = header.dump() + "\n";
  out.append(bytes.begin(), bytes.end());
  return out;
}

inline PatchMask deserialize_mask(const std::string& data) {
  const auto nl = data.find('\n');
  require(nl != std::string::npos, ErrorCode::kIo, "mask header missing");
  const auto header = nlohmann::json::parse(data.substr(0, nl));
  PatchMask m;
  m.grid = {header.at("grid")[0].get<int>(), header.at("grid")[1].get<int>(),
            header.at("grid")[2].get<int>()};
  m.strategy = mask_strategy_from_string(header.at("strategy").get<std::string>());
  m.seed = header.at("seed").get<std::uint64_t>();
  const auto nbytes = header.at("bytes").get<std::size_t>();
  require(data.size() - nl - 1 == nbytes, ErrorCode::kIo, "mask bitset length mismatch");
  m.bits.assign(static_cast<std::size_t>(m.grid.size()), false);
  for (std::size_t i = 0; i < m.bits.size(); ++i)
    m.bits[i] = (static_cast<std::uint8_t>(data[nl + 1 + i / 8]) >> (i % 8)) & 1u;
  for (const auto& b : header.at("blocks"))
    m.blocks.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>(),
                        b[4].get<int>(), b[5].get<int>()});
  require(m.count() == header.at("count").get<int>(), ErrorCode::kIo, "mask popcount mismatch");
  return m;
}

}  // namespace violet
