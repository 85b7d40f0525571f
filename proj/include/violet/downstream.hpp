// SPDX-License-Identifier: Apache-2.0
//
// Task adapters: text-to-video retrieval, QA through the MLM head, and
// greedy captioning under a causal text mask.
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "violet/autograd.hpp"
#include "violet/error.hpp"
#include "violet/masking.hpp"
#include "violet/model.hpp"
#include "violet/objectives.hpp"
#include "violet/rng.hpp"
#include "violet/synth_data.hpp"

namespace violet {

// ---------------------------------------------------------------------------
// Retrieval

/// FC^T2V logit of one (video, text) pair; `zero_shot` scores with FC^VTM.
inline double retrieval_score(const ModelConfig& config, const ParamStore& params,
                              const Array4d& frames, const std::vector<int>& text, bool zero_shot) {
  Tape tape;
  Model model(tape, config, params);
  const JointFeatures h = model.cross_fuse(model.video_encode(frames), model.embed_text(text));
  return model.match_logit(h.h_c, !zero_shot).scalar();
}

/// Text-to-video: query q is text q, candidate c is video c, and the positive
/// of query q is candidate q.
struct RetrievalIndex {
  std::vector<std::string> candidate_ids;
  Matrix scores;  // queries x candidates
  std::vector<int> positive;
};

/// Scores every (text, video) pair. Each video is encoded once.
inline RetrievalIndex build_retrieval_index(const ModelConfig& config, const ParamStore& params,
                                            const std::vector<Array4d>& videos,
                                            const std::vector<std::vector<int>>& texts,
                                            const std::vector<std::string>& ids, bool zero_shot) {
  require(!videos.empty() && videos.size() == texts.size() && ids.size() == videos.size(),
          ErrorCode::kInvalidArgument, "retrieval needs one text and one id per video");
  const auto n = static_cast<Eigen::Index>(videos.size());
  RetrievalIndex index;
  index.candidate_ids = ids;
  index.scores.resize(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    Tape tape;
    Model model(tape, config, params);
    const Var v = model.video_encode(videos[static_cast<std::size_t>(c)]);
    for (Eigen::Index q = 0; q < n; ++q) {
      const JointFeatures h = model.cross_fuse(v, model.embed_text(texts[static_cast<std::size_t>(q)]));
      index.scores(q, c) = model.match_logit(h.h_c, !zero_shot).scalar();
    }
  }
  for (Eigen::Index q = 0; q < n; ++q) index.positive.push_back(static_cast<int>(q));
  return index;
}

/// 0-based rank of candidate `pos` in a score row; ties go to the lower id.
inline int rank_of(const Eigen::RowVectorXd& row, int pos) {
  int rank = 0;
  for (Eigen::Index c = 0; c < row.size(); ++c)
    if (row(c) > row(pos) || (row(c) == row(pos) && c < pos)) ++rank;
  return rank;
}

inline double recall_at_k(const RetrievalIndex& index, int k) {
  require(index.scores.rows() > 0, ErrorCode::kInvalidArgument, "retrieval index is empty");
  require(k >= 1 && k <= index.scores.cols(), ErrorCode::kInvalidArgument,
          "K = " + std::to_string(k) + " outside 1.." + std::to_string(index.scores.cols()));
  int hits = 0;
  for (Eigen::Index q = 0; q < index.scores.rows(); ++q)
    hits += rank_of(index.scores.row(q), index.positive[static_cast<std::size_t>(q)]) < k;
  return static_cast<double>(hits) / static_cast<double>(index.scores.rows());
}

/// Fine-tuning loss: per text query, softmax cross-entropy of its video
/// against every other video in the batch, scored by FC^T2V.
inline Var retrieval_loss(Model& model, const std::vector<Array4d>& videos,
                          const std::vector<std::vector<int>>& texts, int* correct = nullptr) {
  require(videos.size() >= 2 && videos.size() == texts.size(), ErrorCode::kInvalidArgument,
          "retrieval loss needs at least two aligned pairs");
  std::vector<Var> v, w;
  for (const auto& f : videos) v.push_back(model.video_encode(f));
  for (const auto& t : texts) w.push_back(model.embed_text(t));
  std::vector<Var> rows;
  for (std::size_t q = 0; q < w.size(); ++q) {
    std::vector<Var> cols{model.match_logit(model.cross_fuse(v[q], w[q]).h_c, true)};
    for (std::size_t c = 0; c < v.size(); ++c)
      if (c != q) cols.push_back(model.match_logit(model.cross_fuse(v[c], w[q]).h_c, true));
    rows.push_back(concat_cols(cols));
  }
  Var logits = concat_rows(rows);
  if (correct) {
    *correct = 0;
    for (Eigen::Index q = 0; q < logits.rows(); ++q) *correct += rank_of(logits.value().row(q), 0) == 0;
  }
  return vtm_loss_from_logits(logits);
}

// ---------------------------------------------------------------------------
// QA as masked language modeling

enum class QaFormat { kMultipleChoice, kOpenEnded, kFillInBlank };

struct QaInstance {
  Array4d video;
  std::string question;              // may contain "[BLANK]" (fill-in-blank)
  std::vector<std::string> options;  // multiple-choice only, at most 5
  int answer_index = -1;             // multiple-choice
  std::string answer;                // open-ended / fill-in-blank word
  QaFormat format = QaFormat::kMultipleChoice;
};

inline constexpr int kMaxQaOptions = 5;

/// Token ids fed to the model and the slot read by the MLM head.
struct QaInput {
  std::vector<int> tokens;
  int mask_position = -1;
};

/// Multiple-choice: Q + A0 + ... + An + [MASK]. Open-ended: Q + [MASK].
/// Fill-in-blank: the question's [BLANK] becomes [MASK].
inline QaInput format_qa(const QaInstance& inst, const Vocabulary& vocab) {
  QaInput in;
  std::istringstream words(inst.question);
  int blanks = 0;
  for (std::string w; words >> w;) {
    if (w == "[BLANK]") {
      ++blanks;
      in.tokens.push_back(Vocabulary::kMask);
      continue;
    }
    for (int id : tokenize(w, vocab)) in.tokens.push_back(id);
  }
  switch (inst.format) {
    case QaFormat::kMultipleChoice:
      require(!inst.options.empty() && static_cast<int>(inst.options.size()) <= kMaxQaOptions,
              ErrorCode::kInvalidInstance, "multiple-choice needs 1..5 options");
      require(blanks == 0, ErrorCode::kInvalidInstance, "multiple-choice question has a [BLANK]");
      for (const auto& o : inst.options)
        for (int id : tokenize(o, vocab)) in.tokens.push_back(id);
      in.tokens.push_back(Vocabulary::kMask);
      break;
    case QaFormat::kOpenEnded:
      require(blanks == 0, ErrorCode::kInvalidInstance, "open-ended question has a [BLANK]");
      in.tokens.push_back(Vocabulary::kMask);
      break;
    case QaFormat::kFillInBlank:
      require(blanks == 1, ErrorCode::kInvalidInstance,
              "fill-in-blank needs exactly one [BLANK] slot, found " + std::to_string(blanks));
      break;
  }
  const auto masks = std::count(in.tokens.begin(), in.tokens.end(), Vocabulary::kMask);
  require(masks == 1, ErrorCode::kInvalidInstance, "QA input must contain exactly one [MASK] slot");
  in.mask_position = static_cast<int>(
      std::find(in.tokens.begin(), in.tokens.end(), Vocabulary::kMask) - in.tokens.begin());
  return in;
}

/// Label at the [MASK] slot: the answer-index token or the answer word.
inline int qa_label(const QaInstance& inst, const Vocabulary& vocab) {
  if (inst.format == QaFormat::kMultipleChoice) {
    require(inst.answer_index >= 0 && inst.answer_index < static_cast<int>(inst.options.size()),
            ErrorCode::kInvalidInstance, "answer index outside option range");
    return vocab.id(std::to_string(inst.answer_index));
  }
  return vocab.id(inst.answer);
}

inline Var qa_logits(Model& model, const QaInstance& inst, const Vocabulary& vocab) {
  const QaInput in = format_qa(inst, vocab);
  const JointFeatures h = model.cross_fuse(model.video_encode(inst.video), model.embed_text(in.tokens));
  return model.mlm_logits(slice_rows(h.h_x, in.mask_position, 1));
}

struct QaPrediction {
  int option = -1;  // multiple-choice index
  int token = -1;   // predicted token id
};

/// Multiple-choice: argmax over the answer-index tokens only, so no other
/// vocabulary logit can change the outcome. Otherwise argmax over all tokens.
inline QaPrediction qa_predict_from_logits(const Eigen::RowVectorXd& logits, const QaInstance& inst,
                                           const Vocabulary& vocab) {
  QaPrediction p;
  if (inst.format == QaFormat::kMultipleChoice) {
    const auto ids = vocab.answer_ids(static_cast<int>(inst.options.size()));
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (p.option < 0 || logits(ids[i]) > logits(ids[static_cast<std::size_t>(p.option)]))
        p.option = static_cast<int>(i);
    p.token = ids[static_cast<std::size_t>(p.option)];
  } else {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    p.token = static_cast<int>(best);
  }
  return p;
}

inline QaPrediction qa_answer(const ModelConfig& config, const ParamStore& params,
                              const QaInstance& inst, const Vocabulary& vocab) {
  Tape tape;
  Model model(tape, config, params);
  return qa_predict_from_logits(qa_logits(model, inst, vocab).value().row(0), inst, vocab);
}

inline bool qa_correct(const QaPrediction& p, const QaInstance& inst, const Vocabulary& vocab) {
  if (inst.format == QaFormat::kMultipleChoice) return p.option == inst.answer_index;
  return p.token == vocab.id(inst.answer);
}

/// Synthetic QA about the first object of a scene. Colours are distinct in
/// generated scenes, so "what shape is the <colour>" is unambiguous.
inline QaInstance make_qa_instance(const SceneSpec& scene, const Array4d& video, QaFormat format,
                                   std::uint64_t seed) {
  require(!scene.objects.empty(), ErrorCode::kInvalidInstance, "QA needs a scene with objects");
  Rng rng(seed);
  const ObjectSpec& obj = scene.objects.front();
  const std::string color = color_name(obj.color);
  const std::string shape = shape_word(obj);
  QaInstance inst;
  inst.video = video;
  inst.format = format;
  const bool ask_color = uniform_int(rng, 0, 1) == 0;
  if (format == QaFormat::kFillInBlank) {
    inst.question = ask_color ? "the " + shape + " is [BLANK]" : "the " + color + " is a [BLANK]";
    inst.answer = ask_color ? color : shape;
    return inst;
  }
  inst.question = ask_color ? "what color is the " + shape : "what shape is the " + color;
  inst.answer = ask_color ? color : shape;
  if (format == QaFormat::kMultipleChoice) {
    std::vector<std::string> pool;
    if (ask_color)
      for (const auto& c : palette()) pool.emplace_back(c.name);
    else
      pool = {"square", "rectangle", "circle"};
    pool.erase(std::find(pool.begin(), pool.end(), inst.answer));
    shuffle(pool, rng);
    const int n = std::min<int>(kMaxQaOptions, static_cast<int>(pool.size()) + 1);
    inst.options.assign(pool.begin(), pool.begin() + (n - 1));
    inst.answer_index = static_cast<int>(uniform_int(rng, 0, n - 1));
    inst.options.insert(inst.options.begin() + inst.answer_index, inst.answer);
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Captioning

inline constexpr int kMaxCaptionSteps = 50;

/// Greedy decoding: at each step the text is the tokens so far plus [MASK];
/// the MLM prediction at [MASK] is appended. Stops at [SEP] (not returned) or
/// after `max_steps` tokens.
inline std::vector<int> caption_generate(const ModelConfig& config, const ParamStore& params,
                                         const Array4d& frames, int max_steps = kMaxCaptionSteps) {
  Matrix video;
  {
    Tape tape;
    Model model(tape, config, params);
    video = model.video_encode(frames).value();
  }
  std::vector<int> out;
  for (int step = 0; step < max_steps; ++step) {
    std::vector<int> text = out;
    text.push_back(Vocabulary::kMask);
    require(static_cast<int>(text.size()) <= config.max_text_len, ErrorCode::kInvalidArgument,
            "caption exceeds max_text_len");
    Tape tape;
    Model model(tape, config, params);
    const JointFeatures h =
        model.cross_fuse(tape.constant(video), model.embed_text(text), AttentionMode::kCausalText);
    const Var logits = model.mlm_logits(slice_rows(h.h_x, static_cast<int>(text.size()) - 1, 1));
    const int next = row_argmax(logits.value(), 0);
    if (next == Vocabulary::kSep) break;
    out.push_back(next);
  }
  return out;
}

/// Caption + [SEP] corrupted at `ratio` ([SEP] is eligible), causal MLM loss.
inline MlmResult caption_loss(Model& model, const Array4d& frames, const std::vector<int>& caption,
                              std::uint64_t seed, double ratio = 0.15) {
  require(!caption.empty(), ErrorCode::kInvalidArgument, "caption is empty");
  std::vector<int> tokens = caption;
  tokens.push_back(Vocabulary::kSep);
  const MlmCorruption c = mlm_corrupt(tokens, model.config().vocab_size, seed, ratio, Vocabulary::kSep);
  const JointFeatures h =
      model.cross_fuse(model.video_encode(frames), model.embed_text(c.tokens), AttentionMode::kCausalText);
  return mlm_loss(model, h.h_x, c);
}

struct CaptionMetrics {
  double exact = 0.0;      // fraction of captions reproduced exactly
  double per_token = 0.0;  // aligned matches / max(len_ref, len_pred), pooled
  int instances = 0;
};

inline CaptionMetrics caption_metrics(const std::vector<std::vector<int>>& predicted,
                                      const std::vector<std::vector<int>>& reference) {
  require(!reference.empty() && predicted.size() == reference.size(), ErrorCode::kInvalidArgument,
          "caption metrics need aligned, nonempty lists");
  CaptionMetrics m;
  m.instances = static_cast<int>(reference.size());
  long matches = 0, slots = 0;
  int exact = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const auto& p = predicted[i];
    const auto& r = reference[i];
    exact += p == r;
    for (std::size_t k = 0; k < std::min(p.size(), r.size()); ++k) matches += p[k] == r[k];
    slots += static_cast<long>(std::max(p.size(), r.size()));
  }
  m.exact = static_cast<double>(exact) / m.instances;
  m.per_token = slots ? static_cast<double>(matches) / static_cast<double>(slots) : 1.0;
  return m;
}

// ---------------------------------------------------------------------------
// Metric records

inline nlohmann::json metric_record(const std::string& task, const std::string& metric, double value,
                                    int num_instances, std::uint64_t seed,
                                    const std::string& checkpoint_id) {
  return {{"task", task},       {"metric", metric}, {"value", value},
          {"num_instances", num_instances}, {"seed", seed}, {"checkpoint_id", checkpoint_id}};
}

}  // namespace violet
