// SPDX-License-Identifier: Apache-2.0
//
// Pre-training losses: L = L_MVM + L_VTM + L_MLM with unit weights.
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/autograd.hpp"
#include "violet/error.hpp"
#include "violet/masking.hpp"
#include "violet/model.hpp"
#include "violet/mvm_targets.hpp"
#include "violet/rng.hpp"
#include "violet/synth_data.hpp"

namespace violet {

// ---------------------------------------------------------------------------
// Heads

/// Head for one target kind. Flow reads the concatenation of a patch and the
/// same patch on the next sampled frame, so its input is 2d wide.
inline HeadSpec mvm_head_spec(TargetKind kind, const ModelConfig& config, bool mlp,
                              int codebook_size = 64, int teacher_dim = 32) {
  HeadSpec h;
  h.name = to_string(kind);
  h.in_dim = kind == TargetKind::kFlow ? 2 * config.hidden : config.hidden;
  h.out_dim = target_dim(kind, config.patch, codebook_size, teacher_dim);
  h.mlp = mlp;
  return h;
}

inline const HeadSpec& find_head(const ModelConfig& config, TargetKind kind) {
  for (const auto& h : config.mvm_heads)
    if (h.name == to_string(kind)) return h;
  throw Error(ErrorCode::kInvalidArgument, "model has no MVM head for " + to_string(kind));
}

/// Prediction rows for a target: one h_v row per masked patch, or for Flow
/// the pair [h_v(t), h_v(t+1)] at the same spatial position.
inline Var mvm_inputs(Var h_v, const TargetTensor& target, int patches_per_frame) {
  for (int p : target.patches)
    require(p >= 0 && p < h_v.rows(), ErrorCode::kInvalidArgument,
            "target row refers to patch " + std::to_string(p) + " outside h_v");
  if (target.kind != TargetKind::kFlow) return gather_rows(h_v, target.patches);
  std::vector<int> next;
  for (int p : target.patches) {
    require(p + patches_per_frame < h_v.rows(), ErrorCode::kInvalidArgument,
            "Flow target row on a frame without successor");
    next.push_back(p + patches_per_frame);
  }
  return concat_cols({gather_rows(h_v, target.patches), gather_rows(h_v, next)});
}

inline void check_head(const HeadSpec& head, const TargetTensor& target) {
  require(head.name == to_string(target.kind), ErrorCode::kInvalidArgument,
          "head " + head.name + " cannot predict " + to_string(target.kind));
  if (target.kind == TargetKind::kVq) {
    require(target.loss == LossKind::kCrossEntropy, ErrorCode::kInvalidArgument,
            "VQ targets use cross-entropy");
    for (int c : target.classes)
      require(c >= 0 && c < head.out_dim, ErrorCode::kInvalidArgument,
              "VQ id exceeds head output size");
  } else {
    require(target.loss != LossKind::kCrossEntropy, ErrorCode::kInvalidArgument,
            "regression targets use l1 or l2");
    require(target.values.cols() == head.out_dim, ErrorCode::kInvalidArgument,
            "head output dim " + std::to_string(head.out_dim) + " does not match target dim " +
                std::to_string(target.values.cols()));
    require(target.values.rows() == target.rows(), ErrorCode::kInvalidArgument,
            "target values and patch list disagree");
  }
}

/// Loss from already-computed predictions (rows aligned with the target).
inline Var mvm_loss_from_predictions(Var pred, const TargetTensor& target) {
  require(pred.rows() == target.rows(), ErrorCode::kInvalidArgument,
          "prediction rows do not align with masked patches");
  switch (target.loss) {
    case LossKind::kL1: return l1_loss(pred, target.values);
    case LossKind::kL2: return l2_loss(pred, target.values);
    case LossKind::kCrossEntropy: return cross_entropy(pred, target.classes);
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown loss kind");
}

/// Mean l1/l2 over every masked coordinate, or mean cross-entropy for VQ.
inline Var mvm_loss(Model& model, Var h_v, const TargetTensor& target, const HeadSpec& head) {
  check_head(head, target);
  if (target.rows() == 0) return model.tape().constant(Matrix::Zero(1, 1));
  Var pred = model.mvm_head(head, mvm_inputs(h_v, target, model.config().patches_per_frame()));
  return mvm_loss_from_predictions(pred, target);
}

// ---------------------------------------------------------------------------
// VTM

/// Rows of [positive logit, negative logits...]; the loss is softmax
/// cross-entropy with the positive at column 0, averaged over anchors.
inline Var vtm_loss_from_logits(Var logits) {
  require(logits.cols() >= 2, ErrorCode::kInvalidArgument, "VTM needs at least one negative");
  return cross_entropy(logits, std::vector<int>(static_cast<std::size_t>(logits.rows()), 0));
}

inline Var vtm_logits(Model& model, const std::vector<Var>& pos_cls,
                      const std::vector<std::vector<Var>>& neg_cls) {
  require(!pos_cls.empty() && pos_cls.size() == neg_cls.size(), ErrorCode::kInvalidArgument,
          "VTM needs one negative list per anchor");
  std::vector<Var> rows;
  for (std::size_t i = 0; i < pos_cls.size(); ++i) {
    require(!neg_cls[i].empty(), ErrorCode::kInvalidArgument, "VTM anchor without negatives");
    require(neg_cls[i].size() == neg_cls.front().size(), ErrorCode::kInvalidArgument,
            "VTM anchors must share a negative count");
    std::vector<Var> cols{model.match_logit(pos_cls[i])};
    for (const Var& n : neg_cls[i]) cols.push_back(model.match_logit(n));
    rows.push_back(concat_cols(cols));
  }
  return concat_rows(rows);
}

inline Var vtm_loss(Model& model, const std::vector<Var>& pos_cls,
                    const std::vector<std::vector<Var>>& neg_cls) {
  return vtm_loss_from_logits(vtm_logits(model, pos_cls, neg_cls));
}

// ---------------------------------------------------------------------------
// MLM

struct MlmResult {
  Var loss;
  int count = 0;
  int correct = 0;
};

inline int row_argmax(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  m.row(row).maxCoeff(&best);
  return static_cast<int>(best);
}

/// Mean cross-entropy at the corrupted positions; 0 with count 0 when none.
inline MlmResult mlm_loss(Model& model, Var h_x, const MlmCorruption& corruption) {
  MlmResult r;
  const std::vector<int> pos = corruption.positions();
  r.count = static_cast<int>(pos.size());
  if (pos.empty()) {
    r.loss = model.tape().constant(Matrix::Zero(1, 1));
    return r;
  }
  const std::vector<int> labels = corruption.target_ids();
  for (int y : labels)
    require(y >= 0 && y < model.config().vocab_size, ErrorCode::kInvalidArgument,
            "MLM label " + std::to_string(y) + " outside vocabulary");
  Var logits = model.mlm_logits(gather_rows(h_x, pos));
  for (std::size_t i = 0; i < labels.size(); ++i)
    r.correct += row_argmax(logits.value(), static_cast<Eigen::Index>(i)) == labels[i];
  r.loss = cross_entropy(logits, labels);
  return r;
}

// ---------------------------------------------------------------------------
// Combined objective

struct ObjectiveConfig {
  bool vtm = true;
  bool mlm = true;
  bool mvm = true;
  std::vector<TargetKind> targets = {TargetKind::kPixel};
  std::vector<MaskStrategy> strategies = {MaskStrategy::kBlockwise, MaskStrategy::kAttended};
  double mask_ratio = 0.15;
  LossKind regression = LossKind::kL1;
  bool mlp_head = true;
  int vtm_negatives = -1;  // -1: every other text in the batch
  double mlm_ratio = 0.15;
  bool mvm_on_images = false;  // single-frame examples count as image data
};

struct PretrainExample {
  FrameSample sample;
  std::shared_ptr<const AnnotatedClip> clip;  // needed by Flow only
  std::vector<int> text;                      // caption ids, no specials
};

struct LossReport {
  double mvm = 0.0;
  double vtm = 0.0;
  double mlm = 0.0;
  double total = 0.0;
  int masked_patches = 0;
  int masked_tokens = 0;
  int vtm_anchors = 0;
  int vtm_correct = 0;
  int mlm_correct = 0;
  std::map<std::string, double> mvm_by_kind;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"mvm", mvm},
                        {"vtm", vtm},
                        {"mlm", mlm},
                        {"total", total},
                        {"masked_patches", masked_patches},
                        {"masked_tokens", masked_tokens},
                        {"vtm_anchors", vtm_anchors},
                        {"vtm_correct", vtm_correct},
                        {"mlm_correct", mlm_correct}};
    j["mvm_by_kind"] = nlohmann::json::object();
    for (const auto& [k, v] : mvm_by_kind) j["mvm_by_kind"][k] = v;
    return j;
  }
};

struct LossResult {
  Var total;
  Var mvm, vtm, mlm;
  LossReport report;
};

/// Masks and corruption chosen for one example (exposed for tests).
struct ExampleMasks {
  PatchMask patches;
  MlmCorruption text;
  bool mvm_applied = false;
};

inline ExampleMasks make_example_masks(Model& model, const PretrainExample& ex,
                                       const ObjectiveConfig& cfg, MaskStrategy strategy,
                                       std::uint64_t seed) {
  const ModelConfig& mc = model.config();
  const PatchGrid grid{ex.sample.frames.frames(), mc.grid(), mc.grid()};
  const bool image = ex.sample.frames.frames() == 1;
  ExampleMasks out;
  out.mvm_applied = cfg.mvm && (!image || cfg.mvm_on_images);
  out.patches = empty_mask(grid);
  const int vocab = mc.vocab_size;

  if (strategy == MaskStrategy::kAttended && (out.mvm_applied || cfg.mlm)) {
    // Intact pass on a scratch tape: scores never enter the gradient.
    Tape scratch;
    Model probe(scratch, mc, model.params());
    const AttentionTrace trace =
        probe.attention_trace(probe.video_encode(ex.sample.frames), probe.embed_text(ex.text));
    std::vector<double> text_scores = trace.text;
    for (std::size_t i = 0; i < ex.text.size(); ++i)
      if (Vocabulary::is_special(ex.text[i])) text_scores[i] = 0.0;
    AttendedMask am = attended_mask(grid, trace.video, text_scores, cfg.mask_ratio);
    am.patches.seed = seed;
    if (out.mvm_applied) out.patches = am.patches;
    if (cfg.mlm) {
      std::vector<bool> sel = am.tokens;
      for (std::size_t i = 0; i < ex.text.size(); ++i)
        if (Vocabulary::is_special(ex.text[i])) sel[i] = false;
      Rng rng(derive_seed(seed, 3));
      out.text = corrupt_positions(ex.text, sel, vocab, rng);
    }
  } else {
    if (out.mvm_applied)
      out.patches = strategy == MaskStrategy::kBlockwise
                        ? blockwise_mask(grid, cfg.mask_ratio, derive_seed(seed, 2))
                        : random_mask(grid, cfg.mask_ratio, derive_seed(seed, 2));
    if (cfg.mlm) out.text = mlm_corrupt(ex.text, vocab, derive_seed(seed, 3), cfg.mlm_ratio);
  }
  if (!cfg.mlm) {
    out.text.tokens = ex.text;
    out.text.labels.assign(ex.text.size(), MlmCorruption::kNoLabel);
    out.text.mask.assign(ex.text.size(), false);
    out.text.replaced.assign(ex.text.size(), Replacement::kNone);
  }
  return out;
}

/// In-batch negatives for anchor i: all other texts, or a seeded subset of
/// size `count`.
inline std::vector<int> negative_indices(int anchor, int batch, int count, std::uint64_t seed) {
  std::vector<int> others;
  for (int j = 0; j < batch; ++j)
    if (j != anchor) others.push_back(j);
  require(!others.empty(), ErrorCode::kInvalidArgument,
          "VTM needs a batch of at least 2 for in-batch negatives");
  if (count < 0 || count >= static_cast<int>(others.size())) return others;
  require(count >= 1, ErrorCode::kInvalidArgument, "VTM negative count must be >= 1");
  Rng rng(seed);
  std::vector<int> pick = sample_without_replacement(static_cast<int>(others.size()), count, rng);
  std::sort(pick.begin(), pick.end());
  std::vector<int> out;
  for (int k : pick) out.push_back(others[static_cast<std::size_t>(k)]);
  return out;
}

/// All enabled losses for one batch on a single tape. Each video is encoded
/// once (masked) and each text embedded once (corrupted); CT runs per pair.
inline LossResult total_loss(Model& model, const std::vector<PretrainExample>& batch,
                             const ObjectiveConfig& cfg, const TargetSources& resources,
                             std::uint64_t seed) {
  require(!batch.empty(), ErrorCode::kInvalidArgument, "empty batch");
  require(cfg.vtm || cfg.mlm || cfg.mvm, ErrorCode::kInvalidConfig, "no objective enabled");
  Tape& tape = model.tape();
  const int b = static_cast<int>(batch.size());
  const auto strategies = mix_strategies(cfg.strategies, b, derive_seed(seed, 1));

  std::vector<ExampleMasks> masks;
  std::vector<Var> videos, texts;
  for (int i = 0; i < b; ++i) {
    const auto& ex = batch[static_cast<std::size_t>(i)];
    masks.push_back(make_example_masks(model, ex, cfg, strategies[static_cast<std::size_t>(i)],
                                       derive_seed(seed, 100 + static_cast<std::uint64_t>(i))));
    const auto& m = masks.back();
    videos.push_back(model.video_encode(ex.sample.frames, m.mvm_applied ? &m.patches.bits : nullptr));
    texts.push_back(model.embed_text(m.text.tokens));
  }

  LossResult out;
  LossReport& rep = out.report;
  std::map<TargetKind, std::vector<Var>> preds;
  std::map<TargetKind, std::vector<TargetTensor>> targets;
  std::vector<Var> mlm_logits;
  std::vector<int> mlm_labels;
  std::vector<Var> pos_cls;
  std::vector<std::vector<Var>> neg_cls;

  for (int i = 0; i < b; ++i) {
    const auto& ex = batch[static_cast<std::size_t>(i)];
    const auto& m = masks[static_cast<std::size_t>(i)];
    const JointFeatures joint = model.cross_fuse(videos[static_cast<std::size_t>(i)],
                                                 texts[static_cast<std::size_t>(i)]);
    if (m.mvm_applied) {
      rep.masked_patches += m.patches.count();
      TargetSources src = resources;
      src.sample = &ex.sample;
      src.clip = ex.clip.get();
      for (TargetKind kind : cfg.targets) {
        TargetTensor t = extract_target(kind, src, m.patches, cfg.regression);
        if (t.rows() == 0) continue;
        const HeadSpec& head = find_head(model.config(), kind);
        check_head(head, t);
        preds[kind].push_back(
            model.mvm_head(head, mvm_inputs(joint.h_v, t, model.config().patches_per_frame())));
        targets[kind].push_back(std::move(t));
      }
    }
    if (cfg.mlm && m.text.count() > 0) {
      Var logits = model.mlm_logits(gather_rows(joint.h_x, m.text.positions()));
      const auto ids = m.text.target_ids();
      for (std::size_t k = 0; k < ids.size(); ++k)
        rep.mlm_correct += row_argmax(logits.value(), static_cast<Eigen::Index>(k)) == ids[k];
      mlm_logits.push_back(logits);
      mlm_labels.insert(mlm_labels.end(), ids.begin(), ids.end());
      rep.masked_tokens += static_cast<int>(ids.size());
    }
    if (cfg.vtm) {
      pos_cls.push_back(joint.h_c);
      std::vector<Var> negs;
      for (int j : negative_indices(i, b, cfg.vtm_negatives,
                                    derive_seed(seed, 200 + static_cast<std::uint64_t>(i))))
        negs.push_back(model.cross_fuse(videos[static_cast<std::size_t>(i)],
                                        texts[static_cast<std::size_t>(j)]).h_c);
      neg_cls.push_back(std::move(negs));
    }
  }

  Var zero = tape.constant(Matrix::Zero(1, 1));
  // MVM: per kind, one mean over every masked coordinate in the batch; kinds add.
  std::vector<Var> kind_losses;
  for (auto& [kind, list] : preds) {
    TargetTensor merged;
    merged.kind = kind;
    merged.loss = targets[kind].front().loss;
    std::vector<Eigen::Index> offsets;
    Eigen::Index rows = 0;
    for (const auto& t : targets[kind]) rows += t.rows();
    if (kind == TargetKind::kVq) {
      for (const auto& t : targets[kind]) merged.classes.insert(merged.classes.end(), t.classes.begin(), t.classes.end());
    } else {
      merged.values.resize(rows, targets[kind].front().values.cols());
      Eigen::Index r = 0;
      for (const auto& t : targets[kind]) {
        merged.values.middleRows(r, t.values.rows()) = t.values;
        r += t.values.rows();
      }
    }
    merged.patches.assign(static_cast<std::size_t>(rows), 0);
    Var loss = mvm_loss_from_predictions(concat_rows(list), merged);
    rep.mvm_by_kind[to_string(kind)] = loss.scalar();
    kind_losses.push_back(loss);
  }
  out.mvm = kind_losses.empty() ? zero : sum_scalars(kind_losses);
  out.mlm = mlm_logits.empty() ? zero : cross_entropy(concat_rows(mlm_logits), mlm_labels);
  if (cfg.vtm) {
    Var logits_var = vtm_logits(model, pos_cls, neg_cls);
    out.vtm = vtm_loss_from_logits(logits_var);
    const Matrix& logits = logits_var.value();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      bool best = true;
      for (Eigen::Index j = 1; j < logits.cols(); ++j) best = best && logits(i, 0) > logits(i, j);
      rep.vtm_correct += best;
    }
    rep.vtm_anchors = b;
  } else {
    out.vtm = zero;
  }
  out.total = sum_scalars({out.mvm, out.vtm, out.mlm});
  rep.mvm = out.mvm.scalar();
  rep.vtm = out.vtm.scalar();
  rep.mlm = out.mlm.scalar();
  rep.total = out.total.scalar();
  return out;
}

}  // namespace violet
