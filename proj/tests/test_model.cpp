#include <filesystem>

#include <gtest/gtest.h>

#include "violet/model.hpp"
#include "violet/synth_data.hpp"

namespace violet {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden = 8;
  c.vt_layers = 1;
  c.vt_heads = 2;
  c.ct_layers = 2;
  c.ct_heads = 2;
  c.mlp_ratio = 2;
  c.patch = 4;
  c.frame_size = 8;
  c.max_frames = 3;
  c.vocab_size = 12;
  c.max_text_len = 6;
  c.init_scale = 0.3;
  c.mvm_heads = {{"Pixel", 8, 48, true}, {"Depth", 8, 16, false}};
  return c;
}

Array4d random_frames(int t, int n, std::uint64_t seed) {
  Rng rng(seed);
  Array4d a(t, n, n, 3);
  for (double& v : a.data()) v = uniform_unit(rng);
  return a;
}

TEST(Patchify, RowLayoutIsRowColumnChannel) {
  const Array4d f = random_frames(2, 8, 1);
  const Matrix p = patchify(f, 4);
  ASSERT_EQ(p.rows(), 8);
  ASSERT_EQ(p.cols(), 48);
  for (int t = 0; t < 2; ++t)
    for (int gy = 0; gy < 2; ++gy)
      for (int gx = 0; gx < 2; ++gx)
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c)
              EXPECT_EQ(p(t * 4 + gy * 2 + gx, (y * 4 + x) * 3 + c), f(t, gy * 4 + y, gx * 4 + x, c));
  EXPECT_THROW(patchify(f, 3), Error);
}

TEST(Init, ShapesScalesAndDeterminism) {
  const ModelConfig c = tiny_config();
  const ParamStore a = init_params(c, 7), b = init_params(c, 7), other = init_params(c, 8);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == other);
  EXPECT_EQ(a.at("vt.patch_embed.w").rows(), 48);
  EXPECT_EQ(a.at("vt.pos_time").rows(), 3);
  EXPECT_EQ(a.at("vt.pos_space").rows(), 4);
  EXPECT_EQ(a.at("le.token").rows(), 12);
  EXPECT_EQ(a.at("head.mlm.w2").cols(), 12);
  EXPECT_EQ(a.at("head.mvm.Pixel.w2").cols(), 48);
  EXPECT_EQ(a.at("head.mvm.Depth.w").rows(), 8);
  EXPECT_TRUE(a.at("ct.blocks.1.attn.bq").isZero());
  EXPECT_TRUE(a.at("vt.ln_out.g").isOnes());
  for (const auto& [path, m] : a) {
    if (path.size() > 2 && path.compare(path.size() - 2, 2, ".g") == 0) continue;  // gains start at one
    EXPECT_LE(m.cwiseAbs().maxCoeff(), 2 * c.init_scale + 1e-15) << path;
  }

  // Independent scalar count: embeddings, blocks, norms, heads.
  const long d = 8, ff = 16;
  const long block = 2 * 2 * d + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d);
  const long expected = (48 * d + d) + d + 3 * d + 4 * d + block + 2 * d + 12 * d + 6 * d + 3 * d + d +
                        2 * block + 2 * d + 2 * (d * d + d + d + 1) + (d * d + d + d * 12 + 12) +
                        (8 * d + d + d * 48 + 48) + (8 * 16 + 16);
  EXPECT_EQ(static_cast<long>(a.num_scalars()), expected);
}

TEST(Init, ValidationRejectsBadConfigs) {
  ModelConfig c = tiny_config();
  c.vt_heads = 3;
  EXPECT_THROW(init_params(c, 0), Error);
  c = tiny_config();
  c.patch = 3;
  EXPECT_THROW(validate(c), Error);
  c = tiny_config();
  c.vocab_size = 0;
  EXPECT_THROW(validate(c), Error);
}

TEST(Model, MaskedPatchContentNeverReachesTheNetwork) {
  const ModelConfig c = tiny_config();
  const ParamStore params = init_params(c, 1);
  Array4d f = random_frames(2, 8, 2);
  std::vector<bool> mask(8, false);
  mask[5] = true;  // frame 1, patch (0, 1)
  Tape t1;
  Model m1(t1, c, params);
  const Matrix out1 = m1.video_encode(f, &mask).value();
  for (int y = 0; y < 4; ++y)
    for (int x = 4; x < 8; ++x) f(1, y, x, 0) += 0.5;
  Tape t2;
  Model m2(t2, c, params);
  EXPECT_TRUE(out1 == m2.video_encode(f, &mask).value());
  Tape t3;
  Model m3(t3, c, params);
  EXPECT_FALSE(out1 == m3.video_encode(f, nullptr).value());
}

TEST(Model, CausalModeHidesFutureTokensAndAllText) {
  const ModelConfig c = tiny_config();
  const ParamStore params = init_params(c, 3);
  const Array4d f = random_frames(1, 8, 4);
  auto run = [&](const std::vector<int>& tokens, AttentionMode mode) {
    Tape t;
    Model m(t, c, params);
    const JointFeatures h = m.cross_fuse(m.video_encode(f), m.embed_text(tokens), mode);
    return std::make_tuple(h.h_v.value(), h.h_c.value(), h.h_x.value());
  };
  const auto [v1, c1, x1] = run({4, 5, 6, 7}, AttentionMode::kCausalText);
  const auto [v2, c2, x2] = run({4, 5, 9, 10}, AttentionMode::kCausalText);
  EXPECT_TRUE(v1 == v2);
  EXPECT_TRUE(c1 == c2);
  EXPECT_TRUE(x1.topRows(2) == x2.topRows(2));
  EXPECT_FALSE(x1.row(2) == x2.row(2));

  const auto [bv1, bc1, bx1] = run({4, 5, 6, 7}, AttentionMode::kBidirectional);
  const auto [bv2, bc2, bx2] = run({4, 5, 9, 10}, AttentionMode::kBidirectional);
  EXPECT_FALSE(bc1 == bc2);
  EXPECT_FALSE(bx1.row(0) == bx2.row(0));

  const BoolMatrix mask = Model::causal_text_mask(2, 3);
  EXPECT_TRUE(mask(2, 1));
  EXPECT_FALSE(mask(2, 3));
  EXPECT_TRUE(mask(4, 4));
  EXPECT_FALSE(mask(4, 5));
}

TEST(Model, AttentionTraceIsADistributionOverCtInputs) {
  const ModelConfig c = tiny_config();
  const ParamStore params = init_params(c, 5);
  Tape t;
  Model m(t, c, params);
  const AttentionTrace tr = m.attention_trace(m.video_encode(random_frames(2, 8, 6)), m.embed_text({4, 8, 11}));
  ASSERT_EQ(tr.video.size(), 8u);
  ASSERT_EQ(tr.text.size(), 3u);
  double total = tr.cls_self;
  for (double v : tr.video) total += v;
  for (double v : tr.text) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Model, RejectsOutOfRangeInputs) {
  const ModelConfig c = tiny_config();
  const ParamStore params = init_params(c, 5);
  Tape t;
  Model m(t, c, params);
  EXPECT_THROW(m.embed_text({1, 12}), Error);
  EXPECT_THROW(m.embed_text(std::vector<int>(7, 4)), Error);
  EXPECT_THROW(m.video_encode(random_frames(4, 8, 1)), Error);
  EXPECT_THROW(m.video_encode(random_frames(1, 12, 1)), Error);
}

TEST(Model, T2vHeadCopiedFromVtmGivesIdenticalLogits) {
  const ModelConfig c = tiny_config();
  ParamStore params = init_params(c, 9);
  init_t2v_from_vtm(params);
  Tape t;
  Model m(t, c, params);
  const JointFeatures h = m.cross_fuse(m.video_encode(random_frames(2, 8, 3)), m.embed_text({5, 6}));
  EXPECT_EQ(m.match_logit(h.h_c, true).scalar(), m.match_logit(h.h_c, false).scalar());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelConfig c = tiny_config();
  const ParamStore params = init_params(c, 11);
  const auto dir = std::filesystem::temp_directory_path() / "violet_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, c, params, {{"note", "x"}});
  const Checkpoint ck = load_checkpoint(dir);
  EXPECT_TRUE(ck.params == params);
  EXPECT_TRUE(ck.config == c);
  EXPECT_EQ(ck.meta.at("note"), "x");
  EXPECT_TRUE(model_config_from_json(to_json(c)) == c);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace violet
