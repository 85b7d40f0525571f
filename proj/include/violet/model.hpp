// SPDX-License-Identifier: Apache-2.0
//
// Video transformer (VT), language embedder (LE) and cross-modal transformer
// (CT). Video patches are addressed in one canonical flat order everywhere:
// frame-major, then patch row, then patch column.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/array.hpp"
#include "violet/autograd.hpp"
#include "violet/checkpoint.hpp"
#include "violet/detail/encoding.hpp"
#include "violet/error.hpp"
#include "violet/rng.hpp"

namespace violet {

/// Extra prediction head attached to h^v rows (one per MVM target).
struct HeadSpec {
  std::string name;
  int in_dim = 0;
  int out_dim = 0;
  bool mlp = true;  // false: single linear layer

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

struct ModelConfig {
  int hidden = 64;
  int vt_layers = 2;
  int vt_heads = 4;
  int ct_layers = 2;
  int ct_heads = 4;
  int mlp_ratio = 4;
  int patch = 16;
  int frame_size = 64;
  int max_frames = 4;
  int vocab_size = 0;
  int max_text_len = 64;
  double init_scale = 0.02;
  std::uint64_t seed = 0;
  std::vector<HeadSpec> mvm_heads;

  int grid() const { return frame_size / patch; }
  int patches_per_frame() const { return grid() * grid(); }
  int patch_dim() const { return patch * patch * 3; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  require(c.hidden > 0, ErrorCode::kInvalidConfig, "hidden must be positive");
  require(c.vt_heads > 0 && c.hidden % c.vt_heads == 0, ErrorCode::kInvalidConfig,
          "hidden must be divisible by vt_heads");
  require(c.ct_heads > 0 && c.hidden % c.ct_heads == 0, ErrorCode::kInvalidConfig,
          "hidden must be divisible by ct_heads");
  require(c.vt_layers >= 0 && c.ct_layers >= 0, ErrorCode::kInvalidConfig, "negative layer count");
  require(c.patch > 0 && c.frame_size > 0 && c.frame_size % c.patch == 0,
          ErrorCode::kInvalidConfig, "patch size must divide frame size");
  require(c.max_frames > 0 && c.max_text_len > 0 && c.mlp_ratio > 0, ErrorCode::kInvalidConfig,
          "max_frames, max_text_len and mlp_ratio must be positive");
  require(c.vocab_size > 0, ErrorCode::kInvalidConfig, "vocab_size must be positive");
  require(c.init_scale > 0.0, ErrorCode::kInvalidConfig, "init_scale must be positive");
  for (const auto& h : c.mvm_heads)
    require(!h.name.empty() && h.in_dim > 0 && h.out_dim > 0, ErrorCode::kInvalidConfig,
            "malformed MVM head spec");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : c.mvm_heads)
    heads.push_back({{"name", h.name}, {"in_dim", h.in_dim}, {"out_dim", h.out_dim}, {"mlp", h.mlp}});
  return {{"hidden", c.hidden},         {"vt_layers", c.vt_layers},   {"vt_heads", c.vt_heads},
          {"ct_layers", c.ct_layers},   {"ct_heads", c.ct_heads},     {"mlp_ratio", c.mlp_ratio},
          {"patch", c.patch},           {"frame_size", c.frame_size}, {"max_frames", c.max_frames},
          {"vocab_size", c.vocab_size}, {"max_text_len", c.max_text_len},
          {"init_scale", c.init_scale}, {"seed", c.seed},             {"mvm_heads", heads}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden = j.at("hidden").get<int>();
  c.vt_layers = j.at("vt_layers").get<int>();
  c.vt_heads = j.at("vt_heads").get<int>();
  c.ct_layers = j.at("ct_layers").get<int>();
  c.ct_heads = j.at("ct_heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.patch = j.at("patch").get<int>();
  c.frame_size = j.at("frame_size").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_text_len = j.at("max_text_len").get<int>();
  c.init_scale = j.at("init_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& h : j.at("mvm_heads"))
    c.mvm_heads.push_back({h.at("name").get<std::string>(), h.at("in_dim").get<int>(),
                           h.at("out_dim").get<int>(), h.at("mlp").get<bool>()});
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

/// Normal(0, scale) truncated at two standard deviations by resampling.
inline Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double scale,
                               std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double z;
    do {
      z = standard_normal(rng);
    } while (std::abs(z) > 2.0);
    m.data()[i] = z * scale;
  }
  return m;
}

struct Initializer {
  ParamStore& store;
  double scale;
  std::uint64_t seed;

  void weight(const std::string& path, Eigen::Index rows, Eigen::Index cols) {
    store.set(path, truncated_normal(rows, cols, scale, derive_seed(seed, fnv1a(path))));
  }
  void zeros(const std::string& path, Eigen::Index rows, Eigen::Index cols) {
    store.set(path, Matrix::Zero(rows, cols));
  }
  void ones(const std::string& path, Eigen::Index rows, Eigen::Index cols) {
    store.set(path, Matrix::Ones(rows, cols));
  }
  void linear(const std::string& prefix, Eigen::Index in, Eigen::Index out, const char* w = "w",
              const char* b = "b") {
    weight(prefix + "." + w, in, out);
    zeros(prefix + "." + b, 1, out);
  }
  void layer_norm(const std::string& prefix, Eigen::Index d) {
    ones(prefix + ".g", 1, d);
    zeros(prefix + ".b", 1, d);
  }
  void block(const std::string& prefix, Eigen::Index d, Eigen::Index hidden) {
    layer_norm(prefix + ".ln1", d);
    linear(prefix + ".attn", d, d, "wq", "bq");
    linear(prefix + ".attn", d, d, "wk", "bk");
    linear(prefix + ".attn", d, d, "wv", "bv");
    linear(prefix + ".attn", d, d, "wo", "bo");
    layer_norm(prefix + ".ln2", d);
    linear(prefix + ".mlp", d, hidden, "w1", "b1");
    linear(prefix + ".mlp", hidden, d, "w2", "b2");
  }
  void mlp_head(const std::string& prefix, Eigen::Index in, Eigen::Index hidden, Eigen::Index out) {
    linear(prefix, in, hidden, "w1", "b1");
    linear(prefix, hidden, out, "w2", "b2");
  }
};

}  // namespace detail

inline std::string mvm_head_prefix(const std::string& name) { return "head.mvm." + name; }

/// Adds (or re-initialises) one MVM head in `params`.
inline void init_mvm_head(ParamStore& params, const ModelConfig& config, const HeadSpec& head,
                          std::uint64_t seed) {
  detail::Initializer init{params, config.init_scale, seed};
  const std::string prefix = mvm_head_prefix(head.name);
  for (const char* leaf : {".w", ".b", ".w1", ".b1", ".w2", ".b2"}) params.erase(prefix + leaf);
  if (head.mlp)
    init.mlp_head(prefix, head.in_dim, config.hidden, head.out_dim);
  else
    init.linear(prefix, head.in_dim, head.out_dim);
}

/// Weights and embeddings: truncated normal (sigma = init_scale, cut at 2
/// sigma), seeded per path. Biases zero; layer-norm gains one.
inline ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  ParamStore params;
  detail::Initializer init{params, config.init_scale, seed};
  const Eigen::Index d = config.hidden;
  const Eigen::Index ff = d * config.mlp_ratio;

  init.linear("vt.patch_embed", config.patch_dim(), d);
  init.weight("vt.mask_token", 1, d);
  init.weight("vt.pos_time", config.max_frames, d);
  init.weight("vt.pos_space", config.patches_per_frame(), d);
  for (int i = 0; i < config.vt_layers; ++i) init.block("vt.blocks." + std::to_string(i), d, ff);
  if (config.vt_layers > 0) init.layer_norm("vt.ln_out", d);

  init.weight("le.token", config.vocab_size, d);
  init.weight("le.pos", config.max_text_len, d);

  init.weight("ct.type", 3, d);
  init.weight("ct.cls", 1, d);
  for (int i = 0; i < config.ct_layers; ++i) init.block("ct.blocks." + std::to_string(i), d, ff);
  if (config.ct_layers > 0) init.layer_norm("ct.ln_out", d);

  init.mlp_head("head.vtm", d, d, 1);
  init.mlp_head("head.t2v", d, d, 1);
  init.mlp_head("head.mlm", d, d, config.vocab_size);
  for (const auto& head : config.mvm_heads) init_mvm_head(params, config, head, seed);
  return params;
}

/// Copies FC^VTM into FC^T2V (retrieval fine-tuning starts from the matching head).
inline void init_t2v_from_vtm(ParamStore& params) {
  for (const char* leaf : {".w1", ".b1", ".w2", ".b2"})
    params.set(std::string("head.t2v") + leaf, params.at(std::string("head.vtm") + leaf));
}

// ---------------------------------------------------------------------------
// Forward pass

/// Flattens frames (T x H x W x 3) into patch rows (T*Gh*Gw x P*P*3). Within a
/// row the layout is (patch row, patch column, channel).
inline Matrix patchify(const Array4d& frames, int patch) {
  require(frames.channels() == 3, ErrorCode::kInvalidArgument, "patchify expects RGB frames");
  require(frames.height() % patch == 0 && frames.width() % patch == 0,
          ErrorCode::kInvalidArgument, "frame size not divisible by patch size");
  const int gh = frames.height() / patch, gw = frames.width() / patch;
  Matrix out(static_cast<Eigen::Index>(frames.frames()) * gh * gw, patch * patch * 3);
  Eigen::Index row = 0;
  for (int t = 0; t < frames.frames(); ++t)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx, ++row) {
        Eigen::Index col = 0;
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            for (int c = 0; c < 3; ++c) out(row, col++) = frames(t, gy * patch + y, gx * patch + x, c);
      }
  return out;
}

enum class AttentionMode {
  kBidirectional,
  /// Text position i sees video, CLS and text positions <= i; video and CLS
  /// see only video and CLS.
  kCausalText,
};

struct JointFeatures {
  Var h_v;  // (T*Gh*Gw) x d, canonical patch order
  Var h_c;  // 1 x d
  Var h_x;  // L x d
  int frames = 0;
};

/// Optional recording of CT attention probabilities: layers x heads x (S x S).
struct AttentionProbe {
  std::vector<std::vector<Matrix>> layers;
};

/// CLS-row attention of the last CT layer, averaged over heads.
struct AttentionTrace {
  std::vector<double> video;  // one per patch, canonical order
  std::vector<double> text;   // one per token
  double cls_self = 0.0;
};

class Model {
 public:
  Model(Tape& tape, const ModelConfig& config, const ParamStore& params)
      : tape_(tape), config_(config), params_(params) {}

  const ModelConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  Tape& tape() { return tape_; }
  Var p(const std::string& path) { return tape_.param(params_, path); }

  /// VT over patch rows. Masked rows are replaced by the learnable mask token
  /// after patch embedding, so masked pixels never reach the network.
  Var video_encode(Var patches, int frames, const std::vector<bool>* mask = nullptr) {
    const int n = frames * config_.patches_per_frame();
    require(frames >= 1 && frames <= config_.max_frames, ErrorCode::kInvalidArgument,
            "frame count outside 1..max_frames");
    require(patches.rows() == n && patches.cols() == config_.patch_dim(),
            ErrorCode::kInvalidArgument, "patch matrix shape does not match config");
    Var x = linear(patches, p("vt.patch_embed.w"), p("vt.patch_embed.b"));
    if (mask) {
      require(static_cast<int>(mask->size()) == n, ErrorCode::kInvalidArgument,
              "mask size does not match patch grid");
      x = replace_rows(x, *mask, p("vt.mask_token"));
    }
    std::vector<int> t_idx(static_cast<std::size_t>(n)), s_idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      t_idx[static_cast<std::size_t>(i)] = i / config_.patches_per_frame();
      s_idx[static_cast<std::size_t>(i)] = i % config_.patches_per_frame();
    }
    x = add(x, add(gather_rows(p("vt.pos_time"), t_idx), gather_rows(p("vt.pos_space"), s_idx)));
    for (int l = 0; l < config_.vt_layers; ++l)
      x = block("vt.blocks." + std::to_string(l), x, config_.vt_heads, nullptr, nullptr);
    if (config_.vt_layers > 0) x = layer_norm(x, p("vt.ln_out.g"), p("vt.ln_out.b"));
    return x;
  }

  Var video_encode(const Array4d& frames, const std::vector<bool>* mask = nullptr) {
    require(frames.height() == config_.frame_size && frames.width() == config_.frame_size,
            ErrorCode::kInvalidArgument, "frame size does not match config");
    return video_encode(tape_.constant(patchify(frames, config_.patch)), frames.frames(), mask);
  }

  /// Token embedding plus position embedding, per position.
  Var embed_text(const std::vector<int>& tokens) {
    require(static_cast<int>(tokens.size()) <= config_.max_text_len, ErrorCode::kInvalidArgument,
            "text longer than max_text_len");
    for (int id : tokens)
      require(id >= 0 && id < config_.vocab_size, ErrorCode::kInvalidArgument,
              "token id " + std::to_string(id) + " out of range");
    if (tokens.empty()) return tape_.constant(Matrix(0, config_.hidden));
    std::vector<int> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    return add(gather_rows(p("le.token"), tokens), gather_rows(p("le.pos"), pos));
  }

  /// CT input sequence [flatten(v); CLS; w] with modality-type embeddings.
  Var ct_input(Var v, Var w) {
    require(v.cols() == config_.hidden && w.cols() == config_.hidden,
            ErrorCode::kInvalidArgument, "cross_fuse: feature width mismatch");
    Var type = p("ct.type");
    std::vector<Var> parts;
    parts.push_back(add_row(v, gather_rows(type, {0})));
    parts.push_back(add(p("ct.cls"), gather_rows(type, {1})));
    if (w.rows() > 0) parts.push_back(add_row(w, gather_rows(type, {2})));
    return concat_rows(parts);
  }

  JointFeatures cross_fuse(Var v, Var w, AttentionMode mode = AttentionMode::kBidirectional,
                           AttentionProbe* probe = nullptr) {
    const int nv = static_cast<int>(v.rows());
    const int nt = static_cast<int>(w.rows());
    Var x = ct_input(v, w);
    BoolMatrix allowed;
    if (mode == AttentionMode::kCausalText) allowed = causal_text_mask(nv, nt);
    const BoolMatrix* mask = mode == AttentionMode::kCausalText ? &allowed : nullptr;
    if (probe) probe->layers.clear();
    for (int l = 0; l < config_.ct_layers; ++l) {
      std::vector<Matrix>* probs = nullptr;
      if (probe) probs = &probe->layers.emplace_back();
      x = block("ct.blocks." + std::to_string(l), x, config_.ct_heads, mask, probs);
    }
    if (config_.ct_layers > 0) x = layer_norm(x, p("ct.ln_out.g"), p("ct.ln_out.b"));
    JointFeatures h;
    h.h_v = slice_rows(x, 0, nv);
    h.h_c = slice_rows(x, nv, 1);
    h.h_x = slice_rows(x, nv + 1, nt);
    h.frames = nv / config_.patches_per_frame();
    return h;
  }

  /// CLS-query attention in the last CT layer, averaged over heads. Must be
  /// run on intact (unmasked) inputs; costs one extra forward pass.
  AttentionTrace attention_trace(Var v, Var w) {
    require(config_.ct_layers > 0, ErrorCode::kInvalidArgument,
            "attention_trace needs at least one CT layer");
    AttentionProbe probe;
    cross_fuse(v, w, AttentionMode::kBidirectional, &probe);
    const auto& last = probe.layers.back();
    const int nv = static_cast<int>(v.rows());
    const int nt = static_cast<int>(w.rows());
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(nv + 1 + nt);
    for (const Matrix& head : last) mean += head.row(nv);
    mean /= static_cast<double>(last.size());
    AttentionTrace trace;
    for (int i = 0; i < nv; ++i) trace.video.push_back(mean(i));
    trace.cls_self = mean(nv);
    for (int i = 0; i < nt; ++i) trace.text.push_back(mean(nv + 1 + i));
    return trace;
  }

  /// Two-layer MLP head: Linear -> GELU -> Linear.
  Var mlp_head(const std::string& prefix, Var x) {
    return linear(gelu(linear(x, p(prefix + ".w1"), p(prefix + ".b1"))), p(prefix + ".w2"),
                  p(prefix + ".b2"));
  }

  Var mvm_head(const HeadSpec& head, Var x) {
    const std::string prefix = mvm_head_prefix(head.name);
    if (head.mlp) return mlp_head(prefix, x);
    return linear(x, p(prefix + ".w"), p(prefix + ".b"));
  }

  /// FC^VTM (or FC^T2V) logit of a CLS representation.
  Var match_logit(Var h_c, bool use_t2v = false) {
    return mlp_head(use_t2v ? "head.t2v" : "head.vtm", h_c);
  }

  Var mlm_logits(Var h_x) { return mlp_head("head.mlm", h_x); }

  static BoolMatrix causal_text_mask(int nv, int nt) {
    const int s = nv + 1 + nt;
    BoolMatrix allowed = BoolMatrix::Constant(s, s, false);
    allowed.topLeftCorner(nv + 1, nv + 1).setConstant(true);
    for (int i = 0; i < nt; ++i) allowed.row(nv + 1 + i).head(nv + 2 + i).setConstant(true);
    return allowed;
  }

 private:
  Var block(const std::string& prefix, Var x, int heads, const BoolMatrix* allowed,
            std::vector<Matrix>* probs) {
    Var h = layer_norm(x, p(prefix + ".ln1.g"), p(prefix + ".ln1.b"));
    Var q = linear(h, p(prefix + ".attn.wq"), p(prefix + ".attn.bq"));
    Var k = linear(h, p(prefix + ".attn.wk"), p(prefix + ".attn.bk"));
    Var v = linear(h, p(prefix + ".attn.wv"), p(prefix + ".attn.bv"));
    Var a = attention(q, k, v, heads, allowed, probs);
    x = add(x, linear(a, p(prefix + ".attn.wo"), p(prefix + ".attn.bo")));
    Var h2 = layer_norm(x, p(prefix + ".ln2.g"), p(prefix + ".ln2.b"));
    Var m = linear(gelu(linear(h2, p(prefix + ".mlp.w1"), p(prefix + ".mlp.b1"))),
                   p(prefix + ".mlp.w2"), p(prefix + ".mlp.b2"));
    return add(x, m);
  }

  Tape& tape_;
  const ModelConfig& config_;
  const ParamStore& params_;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& config,
                            const ParamStore& params, nlohmann::json meta = nlohmann::json::object()) {
  meta["model"] = to_json(config);
  save_params(params, meta, dir);
}

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  nlohmann::json meta;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.meta = load_checkpoint_config(dir);
  ck.config = model_config_from_json(ck.meta.at("model"));
  ck.params = load_params(dir);
  return ck;
}

}  // namespace violet
