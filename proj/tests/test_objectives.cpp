#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "violet/objectives.hpp"

namespace violet {
namespace {

Matrix random_matrix(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

// Small corpus, model and batch shared by the combined-objective tests.
struct Fixture {
  Corpus corpus;
  ModelConfig config;
  ParamStore params;
  std::vector<PretrainExample> batch;

  explicit Fixture(int batch_size, std::vector<TargetKind> kinds = {TargetKind::kPixel}) {
    CorpusConfig cc;
    cc.size = std::max(batch_size, 2);
    cc.seed = 4;
    cc.scene.canvas_size = 16;
    cc.scene.frame_count = 4;
    corpus = build_corpus(cc);
    config.hidden = 8;
    config.vt_layers = 1;
    config.vt_heads = 2;
    config.ct_layers = 1;
    config.ct_heads = 2;
    config.mlp_ratio = 2;
    config.patch = 8;
    config.frame_size = 16;
    config.max_frames = 2;
    config.vocab_size = corpus.vocab().size();
    config.max_text_len = 24;
    config.init_scale = 0.3;
    for (TargetKind k : kinds) config.mvm_heads.push_back(mvm_head_spec(k, config, true));
    params = init_params(config, 5);
    for (int i = 0; i < batch_size; ++i) {
      auto clip = std::make_shared<const AnnotatedClip>(corpus.clip(i));
      PretrainExample ex;
      ex.sample = sample_frames(*clip, 2, SampleMode::kEval, 16, 0);
      ex.clip = clip;
      ex.text = tokenize(clip->caption, corpus.vocab());
      batch.push_back(std::move(ex));
    }
  }

  ObjectiveConfig objective() const {
    ObjectiveConfig oc;
    oc.strategies = {MaskStrategy::kRandom};
    oc.mask_ratio = 0.3;
    oc.mlm_ratio = 0.5;
    return oc;
  }

  LossReport report(const ObjectiveConfig& oc, const ParamStore& p, std::uint64_t seed = 1) const {
    Tape tape;
    Model model(tape, config, p);
    return total_loss(model, batch, oc, {}, seed).report;
  }
};

void zero_head(ParamStore& p, const std::string& prefix) {
  for (const char* leaf : {".w2", ".b2"}) p.at(prefix + leaf).setZero();
}

TEST(Vtm, UniformLogitsGiveLogOfCandidateCount) {
  Tape tape;
  EXPECT_NEAR(vtm_loss_from_logits(tape.constant(Matrix::Constant(8, 8, 0.3))).scalar(), std::log(8.0), 1e-12);
  EXPECT_THROW(vtm_loss_from_logits(tape.constant(Matrix::Zero(3, 1))), Error);

  Fixture f(8);
  zero_head(f.params, "head.vtm");
  ObjectiveConfig oc = f.objective();
  oc.mlm = oc.mvm = false;
  const LossReport r = f.report(oc, f.params);
  EXPECT_NEAR(r.vtm, std::log(8.0), 1e-9);
  EXPECT_EQ(r.vtm_anchors, 8);
}

TEST(Vtm, MatchesBruteForceSoftmax) {
  const Matrix logits = random_matrix(4, 5, 3);
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    double z = 0.0;
    for (int j = 0; j < 5; ++j) z += std::exp(logits(i, j));
    expect -= std::log(std::exp(logits(i, 0)) / z) / 4.0;
  }
  Tape tape;
  EXPECT_NEAR(vtm_loss_from_logits(tape.constant(logits)).scalar(), expect, 1e-12);
  Matrix sure = Matrix::Zero(2, 3);
  sure.col(0).setConstant(60.0);
  EXPECT_LT(vtm_loss_from_logits(tape.constant(sure)).scalar(), 1e-20);
}

TEST(Vtm, NegativeSelection) {
  EXPECT_EQ(negative_indices(2, 5, -1, 0), (std::vector<int>{0, 1, 3, 4}));
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto one = negative_indices(1, 6, 1, s);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_NE(one[0], 1);
    EXPECT_EQ(one, negative_indices(1, 6, 1, s));
  }
  EXPECT_THROW(negative_indices(0, 1, -1, 0), Error);
}

TEST(Mlm, UniformLogitsAndHandWorkedValues) {
  Fixture f(2);
  ParamStore p = f.params;
  zero_head(p, "head.mlm");
  Tape tape;
  Model model(tape, f.config, p);
  MlmCorruption c = mlm_corrupt({6, 7, 8, 9, 10}, f.config.vocab_size, 3, 1.0);
  const Var h = tape.constant(random_matrix(5, 8, 9));
  const MlmResult r = mlm_loss(model, h, c);
  EXPECT_EQ(r.count, 5);
  EXPECT_NEAR(r.loss.scalar(), std::log(static_cast<double>(f.config.vocab_size)), 1e-12);

  Tape t2;
  EXPECT_NEAR(cross_entropy(t2.constant(Matrix::Zero(3, 10)), {1, 5, 9}).scalar(), std::log(10.0), 1e-12);
  Matrix hand(3, 3);
  hand << 1, 2, 3, 0, 0, 0, -1, 4, 1;
  const double expect = (-std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0))) +
                         std::log(3.0) - std::log(std::exp(-1.0) / (std::exp(-1.0) + std::exp(4.0) + std::exp(1.0)))) / 3.0;
  EXPECT_NEAR(cross_entropy(t2.constant(hand), {2, 1, 0}).scalar(), expect, 1e-12);

  const MlmResult none = mlm_loss(model, h, mlm_corrupt({6, 7, 8, 9, 10}, f.config.vocab_size, 3, 0.0));
  EXPECT_EQ(none.count, 0);
  EXPECT_EQ(none.loss.scalar(), 0.0);
  c.labels[0] = f.config.vocab_size;
  EXPECT_THROW(mlm_loss(model, h, c), Error);
}

TEST(Mvm, RegressionLossesMatchHandSums) {
  TargetTensor t;
  t.kind = TargetKind::kPixel;
  t.values = random_matrix(5, 6, 1);
  t.patches = {0, 2, 3, 5, 7};
  Tape tape;
  EXPECT_EQ(mvm_loss_from_predictions(tape.constant(t.values), t).scalar(), 0.0);
  EXPECT_NEAR(mvm_loss_from_predictions(tape.constant(t.values.array() + 0.25), t).scalar(), 0.25, 1e-15);
  const Matrix pred = random_matrix(5, 6, 2);
  double l1 = 0.0, l2 = 0.0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) {
      l1 += std::abs(pred(i, j) - t.values(i, j)) / 30.0;
      l2 += (pred(i, j) - t.values(i, j)) * (pred(i, j) - t.values(i, j)) / 30.0;
    }
  EXPECT_NEAR(mvm_loss_from_predictions(tape.constant(pred), t).scalar(), l1, 1e-14);
  t.loss = LossKind::kL2;
  EXPECT_NEAR(mvm_loss_from_predictions(tape.constant(pred), t).scalar(), l2, 1e-14);
  EXPECT_THROW(mvm_loss_from_predictions(tape.constant(pred.topRows(4)), t), Error);
}

TEST(Mvm, HeadInputsAreMaskedRowsAndFlowPairs) {
  Tape tape;
  const Matrix h = random_matrix(8, 3, 4);
  TargetTensor t;
  t.kind = TargetKind::kHog;
  t.patches = {1, 6};
  const Matrix in = mvm_inputs(tape.constant(h), t, 4).value();
  EXPECT_TRUE(in.row(0) == h.row(1));
  EXPECT_TRUE(in.row(1) == h.row(6));
  t.kind = TargetKind::kFlow;
  t.patches = {1, 3};
  const Matrix flow = mvm_inputs(tape.constant(h), t, 4).value();
  ASSERT_EQ(flow.cols(), 6);
  EXPECT_TRUE(flow.row(0).head(3) == h.row(1));
  EXPECT_TRUE(flow.row(0).tail(3) == h.row(5));
  EXPECT_TRUE(flow.row(1).tail(3) == h.row(7));
  t.patches = {5};
  EXPECT_THROW(mvm_inputs(tape.constant(h), t, 4), Error);
}

TEST(Mvm, LossIgnoresUnmaskedRows) {
  Fixture f(2);
  const HeadSpec& head = f.config.mvm_heads.front();
  TargetTensor t;
  t.kind = TargetKind::kPixel;
  t.patches = {1, 6};
  t.values = random_matrix(2, head.out_dim, 7);
  Matrix h = random_matrix(8, 8, 8);
  auto loss = [&](const Matrix& hv) {
    Tape tape;
    Model model(tape, f.config, f.params);
    return mvm_loss(model, tape.constant(hv), t, head).scalar();
  };
  const double base = loss(h);
  for (int r : {0, 2, 3, 4, 5, 7}) h.row(r).array() += 1.0;
  EXPECT_EQ(loss(h), base);
  h.row(6).array() += 1.0;
  EXPECT_NE(loss(h), base);

  TargetTensor vq;
  vq.kind = TargetKind::kVq;
  vq.loss = LossKind::kCrossEntropy;
  vq.patches = {0};
  vq.classes = {1};
  Tape tape;
  Model model(tape, f.config, f.params);
  EXPECT_THROW(mvm_loss(model, tape.constant(h), vq, head), Error);
}

TEST(TotalLoss, IsTheSumOfItsParts) {
  Fixture f(3);
  const ObjectiveConfig oc = f.objective();
  const LossReport r = f.report(oc, f.params);
  EXPECT_EQ(r.total, r.mvm + r.vtm + r.mlm);
  EXPECT_GT(r.mvm, 0.0);
  EXPECT_GT(r.masked_patches, 0);
  EXPECT_GT(r.masked_tokens, 0);

  ObjectiveConfig no_mvm = oc;
  no_mvm.mvm = false;
  const LossReport without = f.report(no_mvm, f.params);
  EXPECT_EQ(without.mvm, 0.0);
  EXPECT_EQ(without.masked_patches, 0);
  EXPECT_EQ(without.total, without.vtm + without.mlm);

  // l1 -> l2 touches only the MVM term.
  ObjectiveConfig l2 = oc;
  l2.regression = LossKind::kL2;
  const LossReport r2 = f.report(l2, f.params);
  EXPECT_NE(r2.mvm, r.mvm);
  EXPECT_EQ(r2.vtm, r.vtm);
  EXPECT_EQ(r2.mlm, r.mlm);

  ObjectiveConfig nothing = oc;
  nothing.vtm = nothing.mlm = nothing.mvm = false;
  EXPECT_THROW(f.report(nothing, f.params), Error);
}

TEST(TotalLoss, ZeroedHeadsGiveClosedForm) {
  Fixture f(2);
  ParamStore p = f.params;
  zero_head(p, "head.vtm");
  zero_head(p, "head.mlm");
  zero_head(p, "head.mvm.Pixel");
  const ObjectiveConfig oc = f.objective();
  const LossReport r = f.report(oc, p);
  EXPECT_NEAR(r.vtm, std::log(2.0), 1e-12);
  if (r.masked_tokens > 0) {
    EXPECT_NEAR(r.mlm, std::log(static_cast<double>(f.config.vocab_size)), 1e-12);
  } else {
    EXPECT_EQ(r.mlm, 0.0);
  }
  // Zero prediction: l1 equals the mean pixel value over the masked patches.
  Tape tape;
  Model model(tape, f.config, p);
  double sum = 0.0;
  long coords = 0;
  for (std::size_t i = 0; i < f.batch.size(); ++i) {
    const ExampleMasks m = make_example_masks(model, f.batch[i], oc, MaskStrategy::kRandom,
                                              derive_seed(1, 100 + static_cast<std::uint64_t>(i)));
    const TargetTensor t = target_pixel(f.batch[i].sample.frames, m.patches);
    sum += t.values.array().abs().sum();
    coords += t.values.size();
  }
  EXPECT_NEAR(r.mvm, sum / static_cast<double>(coords), 1e-12);
}

TEST(TotalLoss, GradientOfTotalIsSumOfComponentGradients) {
  Fixture f(2, {TargetKind::kPixel, TargetKind::kHog});
  const ObjectiveConfig oc = [&] {
    ObjectiveConfig c = f.objective();
    c.targets = {TargetKind::kPixel, TargetKind::kHog};
    return c;
  }();
  auto grads = [&](int which) {
    Tape tape;
    Model model(tape, f.config, f.params);
    const LossResult r = total_loss(model, f.batch, oc, {}, 9);
    const Var parts[] = {r.total, r.mvm, r.vtm, r.mlm};
    tape.backward(parts[which]);
    return tape.param_grads();
  };
  const ParamStore total = grads(0);
  const ParamStore a = grads(1), b = grads(2), c = grads(3);
  for (const auto& [path, g] : total) {
    Matrix sum = Matrix::Zero(g.rows(), g.cols());
    for (const ParamStore* part : {&a, &b, &c})
      if (part->contains(path)) sum += part->at(path);
    EXPECT_LE((sum - g).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + g.cwiseAbs().maxCoeff())) << path;
  }
}

TEST(TotalLoss, AttendedMaskingUsesAnIntactPassAndStaysDeterministic) {
  Fixture f(2);
  ObjectiveConfig oc = f.objective();
  oc.strategies = {MaskStrategy::kAttended};
  Tape tape;
  Model model(tape, f.config, f.params);
  const ExampleMasks m = make_example_masks(model, f.batch[0], oc, MaskStrategy::kAttended, 5);
  EXPECT_EQ(m.patches.count(), ratio_count(0.3, 8));
  EXPECT_EQ(m.patches.strategy, MaskStrategy::kAttended);
  const ExampleMasks again = make_example_masks(model, f.batch[0], oc, MaskStrategy::kAttended, 6);
  EXPECT_EQ(again.patches.bits, m.patches.bits);
  EXPECT_EQ(f.report(oc, f.params, 3).total, f.report(oc, f.params, 3).total);
}

TEST(TotalLoss, ImagesSkipMvmUnlessEnabled) {
  Fixture f(2);
  for (auto& ex : f.batch) {
    ex.sample = sample_frames(*ex.clip, 1, SampleMode::kEval, 16, 0);
  }
  const ObjectiveConfig oc = f.objective();
  EXPECT_EQ(f.report(oc, f.params).masked_patches, 0);
  ObjectiveConfig on = oc;
  on.mvm_on_images = true;
  EXPECT_GT(f.report(on, f.params).masked_patches, 0);
}

}  // namespace
}  // namespace violet
