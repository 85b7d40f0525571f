#include <algorithm>
#include <limits>

#include <gtest/gtest.h>

#include "violet/downstream.hpp"

namespace violet {
namespace {

ModelConfig small_config(int vocab, int max_text_len = 24) {
  ModelConfig c;
  c.hidden = 8;
  c.vt_layers = 1;
  c.vt_heads = 2;
  c.ct_layers = 1;
  c.ct_heads = 2;
  c.mlp_ratio = 2;
  c.patch = 8;
  c.frame_size = 16;
  c.max_frames = 2;
  c.vocab_size = vocab;
  c.max_text_len = max_text_len;
  c.init_scale = 0.3;
  return c;
}

std::vector<AnnotatedClip> clips(int n, std::uint64_t seed) {
  RandomSceneOptions so;
  so.canvas_size = 16;
  so.frame_count = 2;
  so.min_objects = 1;
  std::vector<AnnotatedClip> out;
  for (int i = 0; i < n; ++i)
    out.push_back(generate_clip(random_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), so)));
  return out;
}

RetrievalIndex index_of(const Matrix& scores) {
  RetrievalIndex idx;
  idx.scores = scores;
  for (int q = 0; q < scores.rows(); ++q) idx.positive.push_back(q);
  return idx;
}

double brute_recall(const Matrix& s, int k) {
  int hits = 0;
  for (int q = 0; q < s.rows(); ++q) {
    int better = 0;
    for (int c = 0; c < s.cols(); ++c)
      if (c != q && (s(q, c) > s(q, q) || (s(q, c) == s(q, q) && c < q))) ++better;
    hits += better < k;
  }
  return static_cast<double>(hits) / static_cast<double>(s.rows());
}

TEST(Retrieval, RecallMatchesBruteForce) {
  const Matrix perfect = Matrix::Identity(6, 6);
  const Matrix reversed = -Matrix::Identity(6, 6);
  for (int k = 1; k <= 6; ++k) {
    EXPECT_EQ(recall_at_k(index_of(perfect), k), 1.0);
    EXPECT_EQ(recall_at_k(index_of(reversed), k), k == 6 ? 1.0 : 0.0);
  }
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix s(6, 6);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = static_cast<double>(uniform_int(rng, 0, 3));
    for (int k = 1; k <= 6; ++k) EXPECT_EQ(recall_at_k(index_of(s), k), brute_recall(s, k));
  }
  EXPECT_THROW(recall_at_k(index_of(perfect), 0), Error);
  EXPECT_THROW(recall_at_k(index_of(perfect), 7), Error);
}

TEST(Retrieval, T2vHeadStartsAsTheZeroShotHead) {
  const Vocabulary vocab = Vocabulary::standard();
  const ModelConfig c = small_config(vocab.size());
  ParamStore params = init_params(c, 2);
  init_t2v_from_vtm(params);
  std::vector<Array4d> videos;
  std::vector<std::vector<int>> texts;
  std::vector<std::string> ids;
  for (const auto& clip : clips(4, 1)) {
    videos.push_back(sample_frames(clip, 2, SampleMode::kEval, 16, 0).frames);
    texts.push_back(tokenize(clip.caption, vocab));
    ids.push_back(clip.clip_id);
  }
  const RetrievalIndex zs = build_retrieval_index(c, params, videos, texts, ids, true);
  const RetrievalIndex ft = build_retrieval_index(c, params, videos, texts, ids, false);
  EXPECT_TRUE(zs.scores == ft.scores);
  EXPECT_EQ(zs.scores(1, 2), retrieval_score(c, params, videos[2], texts[1], true));

  Tape tape;
  Model model(tape, c, params);
  int correct = -1;
  const Var loss = retrieval_loss(model, videos, texts, &correct);
  EXPECT_GE(correct, 0);
  EXPECT_LE(correct, 4);
  EXPECT_GT(loss.scalar(), 0.0);
  EXPECT_THROW(retrieval_loss(model, {videos[0]}, {texts[0]}), Error);
}

TEST(Qa, MultipleChoiceIgnoresNonOptionLogits) {
  const Vocabulary vocab = Vocabulary::standard();
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    QaInstance inst;
    inst.format = QaFormat::kMultipleChoice;
    const int n = static_cast<int>(uniform_int(rng, 1, kMaxQaOptions));
    inst.options.assign(static_cast<std::size_t>(n), "red");
    Eigen::RowVectorXd logits(vocab.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = standard_normal(rng);
    const QaPrediction p = qa_predict_from_logits(logits, inst, vocab);

    const auto ids = vocab.answer_ids(n);
    Eigen::RowVectorXd masked = Eigen::RowVectorXd::Constant(vocab.size(), -std::numeric_limits<double>::infinity());
    for (int id : ids) masked(id) = logits(id);
    Eigen::Index best = 0;
    masked.maxCoeff(&best);
    EXPECT_EQ(p.token, static_cast<int>(best));
    EXPECT_EQ(ids[static_cast<std::size_t>(p.option)], p.token);

    Eigen::RowVectorXd perturbed = logits;
    for (Eigen::Index i = 0; i < perturbed.size(); ++i)
      if (std::find(ids.begin(), ids.end(), static_cast<int>(i)) == ids.end()) perturbed(i) = 100.0 * standard_normal(rng);
    EXPECT_EQ(qa_predict_from_logits(perturbed, inst, vocab).option, p.option);
  }
}

TEST(Qa, OpenEndedTakesTheFullArgmax) {
  const Vocabulary vocab = Vocabulary::standard();
  QaInstance inst;
  inst.format = QaFormat::kOpenEnded;
  inst.answer = "circle";
  Eigen::RowVectorXd logits = Eigen::RowVectorXd::Zero(vocab.size());
  logits(vocab.id("circle")) = 2.0;
  const QaPrediction p = qa_predict_from_logits(logits, inst, vocab);
  EXPECT_EQ(p.token, vocab.id("circle"));
  EXPECT_TRUE(qa_correct(p, inst, vocab));
}

TEST(Qa, FormattingPutsOneMaskWhereTheAnswerGoes) {
  const Vocabulary vocab = Vocabulary::standard();
  QaInstance mc;
  mc.question = "what color is the square";
  mc.options = {"red", "blue"};
  mc.answer_index = 1;
  const QaInput in = format_qa(mc, vocab);
  EXPECT_EQ(in.mask_position, static_cast<int>(in.tokens.size()) - 1);
  EXPECT_EQ(in.tokens.size(), 8u);
  EXPECT_EQ(qa_label(mc, vocab), vocab.id("1"));

  QaInstance fib;
  fib.format = QaFormat::kFillInBlank;
  fib.question = "the square is [BLANK]";
  fib.answer = "red";
  EXPECT_EQ(format_qa(fib, vocab).mask_position, 3);
  EXPECT_EQ(qa_label(fib, vocab), vocab.id("red"));

  QaInstance bad = mc;
  bad.options.assign(6, "red");
  EXPECT_THROW(format_qa(bad, vocab), Error);
  bad.options.clear();
  EXPECT_THROW(format_qa(bad, vocab), Error);
  bad = fib;
  bad.question = "the square is red";
  try {
    format_qa(bad, vocab);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidInstance);
  }
  bad.question = "[BLANK] is [BLANK]";
  EXPECT_THROW(format_qa(bad, vocab), Error);
  bad = mc;
  bad.answer_index = 2;
  EXPECT_THROW(qa_label(bad, vocab), Error);
}

TEST(Qa, GeneratedInstancesAreAnswerable) {
  const Vocabulary vocab = Vocabulary::standard();
  for (const auto& clip : clips(20, 9)) {
    for (QaFormat f : {QaFormat::kMultipleChoice, QaFormat::kOpenEnded, QaFormat::kFillInBlank}) {
      const QaInstance inst = make_qa_instance(clip.scene, clip.frames, f, 4);
      EXPECT_NO_THROW(format_qa(inst, vocab));
      EXPECT_TRUE(vocab.contains(inst.answer));
      if (f == QaFormat::kMultipleChoice) {
        EXPECT_EQ(inst.options[static_cast<std::size_t>(inst.answer_index)], inst.answer);
        EXPECT_EQ(std::count(inst.options.begin(), inst.options.end(), inst.answer), 1);
      }
    }
  }
}

TEST(Captioning, HaltsAtSeparatorOrStepLimit) {
  const Vocabulary vocab = Vocabulary::standard();
  const ModelConfig c = small_config(vocab.size(), kMaxCaptionSteps + 1);
  ParamStore params = init_params(c, 4);
  const Array4d frames = sample_frames(clips(1, 2)[0], 2, SampleMode::kEval, 16, 0).frames;
  params.at("head.mlm.w2").setZero();
  params.at("head.mlm.b2").setZero();
  params.at("head.mlm.b2")(0, Vocabulary::kSep) = 50.0;
  EXPECT_TRUE(caption_generate(c, params, frames).empty());

  params.at("head.mlm.b2").setZero();
  params.at("head.mlm.b2")(0, vocab.id("red")) = 50.0;
  const auto loop = caption_generate(c, params, frames);
  EXPECT_EQ(loop.size(), static_cast<std::size_t>(kMaxCaptionSteps));
  EXPECT_TRUE(std::all_of(loop.begin(), loop.end(), [&](int t) { return t == vocab.id("red"); }));
  EXPECT_EQ(caption_generate(c, params, frames, 3).size(), 3u);
}

TEST(Captioning, LossAndMetrics) {
  const Vocabulary vocab = Vocabulary::standard();
  const ModelConfig c = small_config(vocab.size());
  const ParamStore params = init_params(c, 4);
  const AnnotatedClip clip = clips(1, 3)[0];
  const Array4d frames = sample_frames(clip, 2, SampleMode::kEval, 16, 0).frames;
  Tape tape;
  Model model(tape, c, params);
  const std::vector<int> caption = tokenize(clip.caption, vocab);
  const MlmResult none = caption_loss(model, frames, caption, 1, 0.0);
  EXPECT_EQ(none.count, 0);
  EXPECT_EQ(none.loss.scalar(), 0.0);
  const MlmResult all = caption_loss(model, frames, caption, 1, 1.0);
  EXPECT_EQ(all.count, static_cast<int>(caption.size()) + 1);
  EXPECT_GT(all.loss.scalar(), 0.0);
  EXPECT_THROW(caption_loss(model, frames, {}, 1), Error);

  const CaptionMetrics m = caption_metrics({{5, 6, 7}, {5, 6}}, {{5, 6, 7}, {5, 9, 7}});
  EXPECT_EQ(m.instances, 2);
  EXPECT_EQ(m.exact, 0.5);
  EXPECT_EQ(m.per_token, 4.0 / 6.0);
  EXPECT_THROW(caption_metrics({}, {}), Error);
}

TEST(Metrics, RecordCarriesEveryField) {
  const auto r = metric_record("qa-mc", "accuracy", 0.5, 10, 3, "ck");
  EXPECT_EQ(r.at("task"), "qa-mc");
  EXPECT_EQ(r.at("metric"), "accuracy");
  EXPECT_EQ(r.at("value"), 0.5);
  EXPECT_EQ(r.at("num_instances"), 10);
  EXPECT_EQ(r.at("seed"), 3);
  EXPECT_EQ(r.at("checkpoint_id"), "ck");
}

}  // namespace
}  // namespace violet
