// SPDX-License-Identifier: Apache-2.0
//
// Synthetic moving-shape video corpora with exact optical-flow and depth
// annotations, the whitespace tokenizer, and the frame sampling contract
// (random subset + shared random crop for training, even spacing + center
// crop for evaluation).
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/array.hpp"
#include "violet/detail/encoding.hpp"
#include "violet/error.hpp"
#include "violet/image_io.hpp"
#include "violet/rng.hpp"

namespace violet {

using Json = nlohmann::json;

enum class Shape { kRectangle, kCircle };

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct NamedColor {
  const char* name;
  Rgb rgb;
};

/// Caption palette. Every channel lies on the 1/255 grid so frames survive an
/// 8-bit image round trip bit-exactly.
inline const std::array<NamedColor, 7>& palette() {
  static const std::array<NamedColor, 7> colors{{
      {"red", {1.0, 0.0, 0.0}},
      {"green", {0.0, 1.0, 0.0}},
      {"blue", {0.0, 0.0, 1.0}},
      {"yellow", {1.0, 1.0, 0.0}},
      {"cyan", {0.0, 1.0, 1.0}},
      {"magenta", {1.0, 0.0, 1.0}},
      {"white", {1.0, 1.0, 1.0}},
  }};
  return colors;
}

inline std::string color_name(const Rgb& c) {
  const NamedColor* best = &palette()[0];
  double best_d = 1e300;
  for (const auto& nc : palette()) {
    const double d = (nc.rgb.r - c.r) * (nc.rgb.r - c.r) + (nc.rgb.g - c.g) * (nc.rgb.g - c.g) +
                     (nc.rgb.b - c.b) * (nc.rgb.b - c.b);
    if (d < best_d) {
      best_d = d;
      best = &nc;
    }
  }
  return best->name;
}

struct ObjectSpec {
  Shape shape = Shape::kRectangle;
  int x = 0;  // top-left at frame 0
  int y = 0;
  int width = 8;  // circle: diameter = width
  int height = 8;
  Rgb color{1.0, 0.0, 0.0};
  int vx = 0;  // pixels per frame
  int vy = 0;
  int depth_rank = 1;  // 1 = nearest

  int extent_w() const { return width; }
  int extent_h() const { return shape == Shape::kCircle ? width : height; }

  /// Whether pixel (px, py) is covered at frame t.
  bool covers(int px, int py, int t) const {
    const int ox = x + vx * t;
    const int oy = y + vy * t;
    if (px < ox || py < oy || px >= ox + extent_w() || py >= oy + extent_h()) return false;
    if (shape == Shape::kRectangle) return true;
    const double r = width / 2.0;
    const double dx = (px + 0.5) - (ox + r);
    const double dy = (py + 0.5) - (oy + r);
    return dx * dx + dy * dy <= r * r;
  }
};

struct SceneSpec {
  int canvas_size = 64;
  std::vector<ObjectSpec> objects;
  int frame_count = 32;
  std::uint64_t seed = 0;

  int num_objects() const { return static_cast<int>(objects.size()); }
};

inline void validate(const SceneSpec& spec) {
  require(spec.canvas_size > 0, ErrorCode::kInvalidSpec, "canvas_size must be positive");
  require(spec.frame_count >= 1, ErrorCode::kInvalidSpec, "frame_count must be >= 1");
  std::vector<int> ranks;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const std::string tag = "object " + std::to_string(i);
    require(o.width > 0 && o.height > 0, ErrorCode::kInvalidSpec, tag + " has empty extent");
    require(std::abs(o.vx) <= 127 && std::abs(o.vy) <= 127, ErrorCode::kInvalidSpec,
            tag + " velocity exceeds 127 px/frame");
    const int last = spec.frame_count - 1;
    for (int t : {0, last}) {
      const int ox = o.x + o.vx * t;
      const int oy = o.y + o.vy * t;
      require(ox >= 0 && oy >= 0 && ox + o.extent_w() <= spec.canvas_size &&
                  oy + o.extent_h() <= spec.canvas_size,
              ErrorCode::kInvalidSpec, tag + " leaves the canvas at frame " + std::to_string(t));
    }
    ranks.push_back(o.depth_rank);
  }
  std::sort(ranks.begin(), ranks.end());
  for (std::size_t i = 0; i < ranks.size(); ++i)
    require(ranks[i] == static_cast<int>(i) + 1, ErrorCode::kInvalidSpec,
            "depth_rank values must be a permutation of 1..num_objects");
}

/// Normalized depth of an object: nearest 0.0, background 1.0, linear in rank.
inline double depth_of_rank(int rank, int num_objects) {
  return static_cast<double>(rank - 1) / static_cast<double>(num_objects);
}

inline std::string direction_words(int vx, int vy) {
  if (vx == 0 && vy == 0) return "stays still";
  std::string out = "moves";
  if (vy < 0) out += " up";
  if (vy > 0) out += " down";
  if (vx < 0) out += " left";
  if (vx > 0) out += " right";
  return out;
}

inline std::string shape_word(const ObjectSpec& o) {
  if (o.shape == Shape::kCircle) return "circle";
  return o.width == o.height ? "square" : "rectangle";
}

/// Caption grammar:
///   caption := "an empty scene" | clause ("and" clause)*
///   clause  := "a" COLOR SHAPE ("moves" [up|down] [left|right] | "stays still")
inline std::string caption_for(const SceneSpec& spec) {
  if (spec.objects.empty()) return "an empty scene";
  std::string out;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (i > 0) out += " and ";
    out += "a " + color_name(o.color) + " " + shape_word(o) + " " + direction_words(o.vx, o.vy);
  }
  return out;
}

struct AnnotatedClip {
  Array4d frames;    // T x H x W x 3
  Array4d gt_flow;   // (T-1) x H x W x 2, pixels per frame, (dx, dy)
  Array4d gt_depth;  // T x H x W x 1
  std::string caption;
  std::string clip_id;
  SceneSpec scene;
};

/// Index of the visible (nearest) object at a pixel, or -1 for background.
inline int visible_object(const SceneSpec& spec, int px, int py, int t) {
  int best = -1;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    if (o.covers(px, py, t) && (best < 0 || o.depth_rank < spec.objects[best].depth_rank))
      best = static_cast<int>(i);
  }
  return best;
}

inline AnnotatedClip generate_clip(const SceneSpec& spec, const std::string& clip_id = "clip") {
  validate(spec);
  const int n = spec.canvas_size;
  const int frames = spec.frame_count;
  AnnotatedClip clip;
  clip.frames = Array4d(frames, n, n, 3, 0.0);
  clip.gt_flow = Array4d(std::max(frames - 1, 0), n, n, 2, 0.0);
  clip.gt_depth = Array4d(frames, n, n, 1, 1.0);
  clip.caption = caption_for(spec);
  clip.clip_id = clip_id;
  clip.scene = spec;

  // Painter's algorithm: far objects first, nearest (rank 1) last.
  std::vector<std::size_t> order(spec.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return spec.objects[a].depth_rank > spec.objects[b].depth_rank;
  });

  for (int t = 0; t < frames; ++t) {
    for (std::size_t idx : order) {
      const auto& o = spec.objects[idx];
      const int ox = o.x + o.vx * t;
      const int oy = o.y + o.vy * t;
      const double depth = depth_of_rank(o.depth_rank, spec.num_objects());
      for (int py = oy; py < oy + o.extent_h(); ++py)
        for (int px = ox; px < ox + o.extent_w(); ++px) {
          if (!o.covers(px, py, t)) continue;
          clip.frames(t, py, px, 0) = o.color.r;
          clip.frames(t, py, px, 1) = o.color.g;
          clip.frames(t, py, px, 2) = o.color.b;
          clip.gt_depth(t, py, px, 0) = depth;
          if (t + 1 < frames) {
            clip.gt_flow(t, py, px, 0) = o.vx;
            clip.gt_flow(t, py, px, 1) = o.vy;
          }
        }
    }
  }
  return clip;
}

struct RandomSceneOptions {
  int canvas_size = 64;
  int frame_count = 32;
  int min_objects = 1;
  int max_objects = 2;
  int max_speed = 1;
};

/// Draws a valid scene: distinct palette colors, random ranks, velocities
/// shrunk where the object would otherwise leave the canvas.
inline SceneSpec random_scene(std::uint64_t seed, const RandomSceneOptions& opt = {}) {
  Rng rng(seed);
  SceneSpec spec;
  spec.canvas_size = opt.canvas_size;
  spec.frame_count = opt.frame_count;
  spec.seed = seed;
  const int count = static_cast<int>(uniform_int(rng, opt.min_objects, opt.max_objects));
  const int n = opt.canvas_size;
  const int min_size = std::max(1, n / 8);
  const int max_size = std::max(min_size, n / 4);
  const int travel = std::max(opt.frame_count - 1, 0);
  std::vector<int> colors = sample_without_replacement(
      static_cast<int>(palette().size()), std::min<int>(count, palette().size()), rng);
  std::vector<int> ranks(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) ranks[static_cast<std::size_t>(i)] = i + 1;
  shuffle(ranks, rng);
  for (int i = 0; i < count; ++i) {
    ObjectSpec o;
    o.shape = uniform_int(rng, 0, 1) == 0 ? Shape::kRectangle : Shape::kCircle;
    o.width = static_cast<int>(uniform_int(rng, min_size, max_size));
    o.height = o.shape == Shape::kCircle ? o.width
                                         : static_cast<int>(uniform_int(rng, min_size, max_size));
    o.color = palette()[static_cast<std::size_t>(colors[static_cast<std::size_t>(i) % colors.size()])].rgb;
    o.depth_rank = ranks[static_cast<std::size_t>(i)];
    auto pick_axis = [&](int extent, int& pos, int& vel) {
      vel = static_cast<int>(uniform_int(rng, -opt.max_speed, opt.max_speed));
      while (vel != 0 && extent + std::abs(vel) * travel > n) vel -= (vel > 0 ? 1 : -1);
      const int lo = std::max(0, -vel * travel);
      const int hi = n - extent - std::max(0, vel * travel);
      pos = static_cast<int>(uniform_int(rng, lo, hi));
    };
    pick_axis(o.extent_w(), o.x, o.vx);
    pick_axis(o.extent_h(), o.y, o.vy);
    spec.objects.push_back(o);
  }
  validate(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary() { tokens_ = {"[PAD]", "[CLS]", "[SEP]", "[MASK]"}; reindex(); }

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    std::set<std::string> sorted(words.begin(), words.end());
    for (const auto& w : sorted)
      if (!ids_.count(w)) tokens_.push_back(w);
    reindex();
  }

  /// Every word the caption and QA grammars can emit, plus answer digits.
  static Vocabulary standard() {
    std::vector<std::string> words = {"a",     "an",    "and",   "empty", "scene",     "moves",
                                      "stays", "still", "up",    "down",  "left",      "right",
                                      "square", "rectangle", "circle", "what", "color", "is",
                                      "the",   "which", "way",   "does",  "move",      "shape",
                                      "0",     "1",     "2",     "3",     "4"};
    for (const auto& c : palette()) words.emplace_back(c.name);
    return Vocabulary(words);
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& w) const { return ids_.count(w) > 0; }
  int id(const std::string& w) const {
    auto it = ids_.find(w);
    require(it != ids_.end(), ErrorCode::kOutOfVocabulary, "word '" + w + "' not in vocabulary");
    return it->second;
  }
  const std::string& token(int id) const {
    require(id >= 0 && id < size(), ErrorCode::kInvalidArgument, "token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  static bool is_special(int id) { return id >= 0 && id < kNumSpecial; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Ids of the answer-index tokens "0".."n-1".
  std::vector<int> answer_ids(int n) const {
    std::vector<int> out;
    for (int i = 0; i < n; ++i) out.push_back(id(std::to_string(i)));
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void reindex() {
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

/// Whitespace split + lowercase. Bracketed special literals such as "[MASK]"
/// pass through case-sensitively. No specials are added.
inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    if (word.size() > 2 && word.front() == '[' && word.back() == ']' && vocab.contains(word)) {
      out.push_back(vocab.id(word));
      continue;
    }
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(vocab.id(word));
  }
  return out;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame sampling

enum class SampleMode { kTrain, kEval };

struct FrameSample {
  Array4d frames;  // T x crop x crop x 3
  Array4d depth;   // T x crop x crop x 1, sliced identically
  std::vector<int> indices;
  int crop_y = 0;
  int crop_x = 0;
  int crop = 0;
};

inline std::vector<int> even_indices(int frame_count, int count) {
  std::vector<int> out;
  if (count == 1) {
    out.push_back((frame_count - 1) / 2);
    return out;
  }
  for (int i = 0; i < count; ++i)
    out.push_back(static_cast<int>(
        std::lround(static_cast<double>(i) * (frame_count - 1) / (count - 1))));
  return out;
}

inline FrameSample sample_frames(const AnnotatedClip& clip, int count, SampleMode mode, int crop,
                                 std::uint64_t seed) {
  const int total = clip.frames.frames();
  const int canvas = clip.frames.height();
  require(count >= 1 && count <= total, ErrorCode::kInvalidArgument,
          "requested " + std::to_string(count) + " frames from a " + std::to_string(total) +
              "-frame cache");
  require(crop >= 1 && crop <= canvas && crop <= clip.frames.width(), ErrorCode::kInvalidArgument,
          "crop larger than canvas");
  FrameSample s;
  s.crop = crop;
  if (mode == SampleMode::kTrain) {
    Rng rng(seed);
    s.indices = sample_without_replacement(total, count, rng);
    std::sort(s.indices.begin(), s.indices.end());
    s.crop_y = static_cast<int>(uniform_int(rng, 0, canvas - crop));
    s.crop_x = static_cast<int>(uniform_int(rng, 0, clip.frames.width() - crop));
  } else {
    s.indices = even_indices(total, count);
    s.crop_y = (canvas - crop) / 2;
    s.crop_x = (clip.frames.width() - crop) / 2;
  }
  s.frames = clip.frames.select(s.indices, s.crop_y, s.crop_x, crop, crop);
  s.depth = clip.gt_depth.select(s.indices, s.crop_y, s.crop_x, crop, crop);
  return s;
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusConfig {
  int size = 64;
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
  RandomSceneOptions scene;
};

struct CorpusEntry {
  std::string clip_id;
  int index = 0;
  bool train = true;
  SceneSpec scene;
  std::string caption;
};

/// Scene specs only; clips are rendered on demand from (seed, index).
class Corpus {
 public:
  Corpus() = default;
  Corpus(CorpusConfig config, std::vector<CorpusEntry> entries, Vocabulary vocab)
      : config_(config), entries_(std::move(entries)), vocab_(std::move(vocab)) {}

  const CorpusConfig& config() const { return config_; }
  const std::vector<CorpusEntry>& entries() const { return entries_; }
  const Vocabulary& vocab() const { return vocab_; }
  int size() const { return static_cast<int>(entries_.size()); }

  std::vector<int> split(bool train) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].train == train) out.push_back(static_cast<int>(i));
    return out;
  }

  AnnotatedClip clip(int i) const {
    const auto& e = entries_.at(static_cast<std::size_t>(i));
    return generate_clip(e.scene, e.clip_id);
  }

 private:
  CorpusConfig config_;
  std::vector<CorpusEntry> entries_;
  Vocabulary vocab_;
};

inline std::string clip_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%05d", index);
  return buf;
}

inline Corpus build_corpus(const CorpusConfig& config) {
  require(config.size >= 2, ErrorCode::kInvalidConfig, "corpus size must be >= 2");
  require(config.train_fraction > 0.0 && config.train_fraction <= 1.0, ErrorCode::kInvalidConfig,
          "train_fraction must be in (0, 1]");
  const int n_train = std::clamp(static_cast<int>(std::lround(config.size * config.train_fraction)),
                                 1, config.size);
  std::vector<int> order(static_cast<std::size_t>(config.size));
  for (int i = 0; i < config.size; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(config.seed, 0xC0FFEE));
  shuffle(order, rng);
  std::vector<bool> is_train(static_cast<std::size_t>(config.size), false);
  for (int k = 0; k < n_train; ++k) is_train[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;

  std::vector<CorpusEntry> entries;
  std::vector<std::string> words = Vocabulary::standard().tokens();
  for (int i = 0; i < config.size; ++i) {
    CorpusEntry e;
    e.index = i;
    e.clip_id = clip_id_for(i);
    e.train = is_train[static_cast<std::size_t>(i)];
    e.scene = random_scene(derive_seed(config.seed, static_cast<std::uint64_t>(i), 1), config.scene);
    e.caption = caption_for(e.scene);
    std::istringstream in(e.caption);
    for (std::string w; in >> w;) words.push_back(w);
    entries.push_back(std::move(e));
  }
  std::vector<std::string> plain;
  for (const auto& w : words)
    if (!(w.size() > 2 && w.front() == '[')) plain.push_back(w);
  return Corpus(config, std::move(entries), Vocabulary(plain));
}

// ---------------------------------------------------------------------------
// Persistence: one directory per clip (frame_%03d.ppm + clip.json) and a
// manifest.json at the corpus root.

inline Json scene_to_json(const SceneSpec& s) {
  Json objs = Json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"shape", o.shape == Shape::kCircle ? "circle" : "rectangle"},
                    {"x", o.x},
                    {"y", o.y},
                    {"width", o.width},
                    {"height", o.height},
                    {"color", {o.color.r, o.color.g, o.color.b}},
                    {"velocity", {o.vx, o.vy}},
                    {"depth_rank", o.depth_rank}});
  return {{"canvas_size", s.canvas_size}, {"frame_count", s.frame_count}, {"seed", s.seed},
          {"objects", objs}};
}

inline SceneSpec scene_from_json(const Json& j) {
  SceneSpec s;
  s.canvas_size = j.at("canvas_size").get<int>();
  s.frame_count = j.at("frame_count").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& jo : j.at("objects")) {
    ObjectSpec o;
    o.shape = jo.at("shape").get<std::string>() == "circle" ? Shape::kCircle : Shape::kRectangle;
    o.x = jo.at("x").get<int>();
    o.y = jo.at("y").get<int>();
    o.width = jo.at("width").get<int>();
    o.height = jo.at("height").get<int>();
    o.color = {jo.at("color")[0].get<double>(), jo.at("color")[1].get<double>(),
               jo.at("color")[2].get<double>()};
    o.vx = jo.at("velocity")[0].get<int>();
    o.vy = jo.at("velocity")[1].get<int>();
    o.depth_rank = jo.at("depth_rank").get<int>();
    s.objects.push_back(o);
  }
  validate(s);
  return s;
}

inline void save_clip(const AnnotatedClip& clip, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (int t = 0; t < clip.frames.frames(); ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.ppm", t);
    write_ppm((dir / name).string(), clip.frames, t);
  }
  // Flow is integral (|v| <= 127) and depth is level / denominator, so both
  // are stored as bytes and reload bit-exactly.
  std::vector<std::uint8_t> flow_bytes;
  flow_bytes.reserve(clip.gt_flow.size());
  for (double v : clip.gt_flow.data())
    flow_bytes.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(std::lround(v))));
  const int denom = std::max(clip.scene.num_objects(), 1);
  std::vector<std::uint8_t> depth_bytes;
  depth_bytes.reserve(clip.gt_depth.size());
  for (double v : clip.gt_depth.data())
    depth_bytes.push_back(static_cast<std::uint8_t>(std::lround(v * denom)));
  const auto shape = [](const Array4d& a) {
    return Json::array({a.frames(), a.height(), a.width(), a.channels()});
  };
  Json j = {{"clip_id", clip.clip_id},
            {"caption", clip.caption},
            {"scene", scene_to_json(clip.scene)},
            {"annotations",
             {{"gt_flow", {{"shape", shape(clip.gt_flow)}, {"dtype", "int8"},
                           {"base64", detail::base64_encode(flow_bytes)}}},
              {"gt_depth", {{"shape", shape(clip.gt_depth)}, {"dtype", "uint8-level"},
                            {"denominator", denom},
                            {"base64", detail::base64_encode(depth_bytes)}}}}}};
  detail::write_text_file((dir / "clip.json").string(), j.dump(1));
}

inline AnnotatedClip load_clip(const std::filesystem::path& dir) {
  const Json j = Json::parse(detail::read_text_file((dir / "clip.json").string()));
  AnnotatedClip clip;
  clip.clip_id = j.at("clip_id").get<std::string>();
  clip.caption = j.at("caption").get<std::string>();
  clip.scene = scene_from_json(j.at("scene"));
  const int n = clip.scene.canvas_size;
  clip.frames = Array4d(clip.scene.frame_count, n, n, 3);
  for (int t = 0; t < clip.scene.frame_count; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.ppm", t);
    read_ppm((dir / name).string(), clip.frames, t);
  }
  const auto& ann = j.at("annotations");
  auto make = [](const Json& s) {
    return Array4d(s[0].get<int>(), s[1].get<int>(), s[2].get<int>(), s[3].get<int>());
  };
  clip.gt_flow = make(ann.at("gt_flow").at("shape"));
  const auto flow = detail::base64_decode(ann.at("gt_flow").at("base64").get<std::string>());
  require(flow.size() == clip.gt_flow.size(), ErrorCode::kIo, "gt_flow size mismatch");
  for (std::size_t i = 0; i < flow.size(); ++i)
    clip.gt_flow.data()[i] = static_cast<double>(static_cast<std::int8_t>(flow[i]));
  clip.gt_depth = make(ann.at("gt_depth").at("shape"));
  const int denom = ann.at("gt_depth").at("denominator").get<int>();
  const auto depth = detail::base64_decode(ann.at("gt_depth").at("base64").get<std::string>());
  require(depth.size() == clip.gt_depth.size(), ErrorCode::kIo, "gt_depth size mismatch");
  for (std::size_t i = 0; i < depth.size(); ++i)
    clip.gt_depth.data()[i] = static_cast<double>(depth[i]) / static_cast<double>(denom);
  return clip;
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json clips = Json::array();
  for (int i = 0; i < corpus.size(); ++i) {
    const auto& e = corpus.entries()[static_cast<std::size_t>(i)];
    save_clip(corpus.clip(i), dir / e.clip_id);
    clips.push_back({{"clip_id", e.clip_id}, {"index", e.index}, {"split", e.train ? "train" : "val"}});
  }
  const auto& c = corpus.config();
  Json manifest = {{"seed", c.seed},
                   {"size", c.size},
                   {"train_fraction", c.train_fraction},
                   {"scene", {{"canvas_size", c.scene.canvas_size},
                              {"frame_count", c.scene.frame_count},
                              {"min_objects", c.scene.min_objects},
                              {"max_objects", c.scene.max_objects},
                              {"max_speed", c.scene.max_speed}}},
                   {"vocabulary", corpus.vocab().tokens()},
                   {"clips", clips}};
  detail::write_text_file((dir / "manifest.json").string(), manifest.dump(1));
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  const Json m = Json::parse(detail::read_text_file((dir / "manifest.json").string()));
  CorpusConfig c;
  c.seed = m.at("seed").get<std::uint64_t>();
  c.size = m.at("size").get<int>();
  c.train_fraction = m.at("train_fraction").get<double>();
  const auto& s = m.at("scene");
  c.scene.canvas_size = s.at("canvas_size").get<int>();
  c.scene.frame_count = s.at("frame_count").get<int>();
  c.scene.min_objects = s.at("min_objects").get<int>();
  c.scene.max_objects = s.at("max_objects").get<int>();
  c.scene.max_speed = s.at("max_speed").get<int>();
  std::vector<std::string> words;
  for (const auto& w : m.at("vocabulary"))
    if (w.get<std::string>().front() != '[') words.push_back(w.get<std::string>());
  std::vector<CorpusEntry> entries;
  for (const auto& jc : m.at("clips")) {
    CorpusEntry e;
    e.clip_id = jc.at("clip_id").get<std::string>();
    e.index = jc.at("index").get<int>();
    e.train = jc.at("split").get<std::string>() == "train";
    const Json cj =
        Json::parse(detail::read_text_file((dir / e.clip_id / "clip.json").string()));
    e.scene = scene_from_json(cj.at("scene"));
    e.caption = cj.at("caption").get<std::string>();
    entries.push_back(std::move(e));
  }
  return Corpus(c, std::move(entries), Vocabulary(words));
}

}  // namespace violet
