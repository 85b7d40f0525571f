#include <cmath>
#include <filesystem>
#include <functional>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "violet/mvm_targets.hpp"

namespace violet {
namespace {

Array4d random_frames(int t, int n, std::uint64_t seed) {
  Rng rng(seed);
  Array4d a(t, n, n, 3);
  for (double& v : a.data()) v = uniform_unit(rng);
  return a;
}

PatchMask full_mask(PatchGrid grid) {
  PatchMask m = empty_mask(grid);
  m.bits.assign(m.bits.size(), true);
  return m;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kIo;
}

TEST(Pixel, ValuesRoundTripAndDims) {
  const Array4d gray(2, 16, 16, 3, 0.5);
  const TargetTensor g = target_pixel(gray, random_mask({2, 2, 2}, 0.4, 1));
  EXPECT_EQ(g.rows(), 4);
  EXPECT_TRUE((g.values.array() == 0.5).all());
  EXPECT_EQ(target_dim(TargetKind::kPixel, 16), 768);

  const Array4d f = random_frames(2, 16, 2);
  const PatchMask m = random_mask({2, 2, 2}, 0.5, 3);
  const TargetTensor t = target_pixel(f, m);
  EXPECT_EQ(t.patches, m.masked_indices());
  for (int i = 0; i < t.rows(); ++i) {
    const int flat = t.patches[static_cast<std::size_t>(i)];
    const int fr = flat / 4, gy = (flat % 4) / 2, gx = flat % 2;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(t.values(i, (y * 8 + x) * 3 + c), f(fr, gy * 8 + y, gx * 8 + x, c));
  }
}

TEST(Hog, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (int patch : {8, 16}) {
      const Array4d f = random_frames(2, 16, 100 + seed);
      const TargetTensor t = target_hog(f, full_mask({2, 16 / patch, 16 / patch}));
      const int g = 16 / patch;
      for (int fr = 0; fr < 2; ++fr) {
        const std::vector<double> ref = oracle::hog_map(f, fr, patch);
        for (int gy = 0; gy < g; ++gy)
          for (int gx = 0; gx < g; ++gx)
            for (int y = 0; y < patch; ++y)
              for (int x = 0; x < patch; ++x)
                EXPECT_NEAR(t.values((fr * g + gy) * g + gx, y * patch + x),
                            ref[static_cast<std::size_t>((gy * patch + y) * 16 + gx * patch + x)], 1e-10);
      }
    }
  }
}

TEST(Hog, ConstantImageIsZeroAndStepEdgesPickTheGradientBin) {
  const Array4d flat(1, 8, 8, 3, 0.3);
  EXPECT_TRUE(target_hog(flat, full_mask({1, 1, 1})).values.isZero());

  // Vertical edge: horizontal gradient, orientation 0 degrees, bin 0.
  Array4d vertical(1, 8, 8, 3, 0.0);
  Array4d horizontal(1, 8, 8, 3, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) {
        vertical(0, y, x, c) = x >= 4 ? 1.0 : 0.0;
        horizontal(0, y, x, c) = y >= 4 ? 1.0 : 0.0;
      }
  const HogParams p;
  const Matrix hv = hog_cell_histograms(image_gradients(vertical, 0), p);
  const Matrix hh = hog_cell_histograms(image_gradients(horizontal, 0), p);
  Eigen::Index bin_v = 0, bin_h = 0;
  hv.row(0).maxCoeff(&bin_v);
  hh.row(0).maxCoeff(&bin_h);
  EXPECT_EQ(bin_v, 0);
  EXPECT_EQ(hv.row(0).sum(), hv(0, 0));
  // Rotating by 90 degrees moves the mass to the 90 degree orientation.
  // 90 degrees sits halfway between the centres of bins 4 and 5.
  EXPECT_DOUBLE_EQ(hh(0, 4) + hh(0, 5), hh.row(0).sum());
  EXPECT_EQ(hh(0, 4), hh(0, 5));
  EXPECT_EQ(bin_h, 4);

  EXPECT_THROW(target_hog(random_frames(1, 12, 1), full_mask({1, 2, 2})), Error);
}

TEST(Depth, ValuesFollowRankMapAndMissingAnnotationsFail) {
  SceneSpec s;
  s.canvas_size = 16;
  s.frame_count = 2;
  ObjectSpec near, far;
  near.width = near.height = 6;
  far.x = 3;
  far.width = far.height = 8;
  far.color = {0, 0, 1};
  far.depth_rank = 2;
  s.objects = {near, far};
  const AnnotatedClip clip = generate_clip(s);
  const FrameSample sample = sample_frames(clip, 2, SampleMode::kEval, 16, 0);
  const TargetTensor t = target_depth(sample, full_mask({2, 2, 2}));
  for (int r = 0; r < t.rows(); ++r) {
    const int flat = t.patches[static_cast<std::size_t>(r)];
    const int fr = flat / 4, gy = (flat % 4) / 2, gx = flat % 2;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double v = t.values(r, y * 8 + x);
        EXPECT_TRUE(v == 0.0 || v == 0.5 || v == 1.0);
        EXPECT_EQ(v, oracle::depth_at(s, gx * 8 + x, gy * 8 + y, sample.indices[static_cast<std::size_t>(fr)]));
      }
  }
  // Bottom-right patch is pure background.
  EXPECT_TRUE((t.values.row(3).array() == 1.0).all());

  FrameSample bare = sample;
  bare.depth = Array4d();
  EXPECT_EQ(code_of([&] { target_depth(bare, full_mask({2, 2, 2})); }), ErrorCode::kUnsupportedTarget);
}

TEST(Flow, AccumulatesOverSkippedFramesAndMatchesTracking) {
  SceneSpec s;
  s.canvas_size = 32;
  s.frame_count = 4;
  ObjectSpec o;
  o.x = 2;
  o.y = 4;
  o.vx = 2;
  s.objects = {o};
  const AnnotatedClip clip = generate_clip(s);
  const FrameSample sample = sample_frames(clip, 2, SampleMode::kEval, 32, 0);  // cached 0 and 3
  ASSERT_EQ(sample.indices, (std::vector<int>{0, 3}));
  const PatchMask m = full_mask({2, 2, 2});
  const TargetTensor t = target_flow(clip, sample, m);
  EXPECT_EQ(t.rows(), 4);  // last frame has no successor
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      // Object pixels ride along for three steps; pixels the object never
      // reaches stay still.
      const double expected = o.covers(x, y, 0) ? 6.0 : (y >= 12 ? 0.0 : oracle::tracked_flow(s, x, y, 0, 3).first);
      EXPECT_EQ(t.values(0, (y * 16 + x) * 2), expected);
      EXPECT_EQ(t.values(0, (y * 16 + x) * 2 + 1), 0.0);
    }

  RandomSceneOptions opt;
  opt.canvas_size = 32;
  opt.frame_count = 8;
  opt.max_objects = 3;
  opt.max_speed = 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SceneSpec rs = random_scene(seed, opt);
    const AnnotatedClip rc = generate_clip(rs);
    const FrameSample smp = sample_frames(rc, 3, SampleMode::kTrain, 16, seed);
    const TargetTensor ft = target_flow(rc, smp, full_mask({3, 2, 2}));
    ASSERT_EQ(ft.rows(), 8);
    for (int r = 0; r < 8; ++r) {
      const int fr = r / 4, gy = (r % 4) / 2, gx = r % 2;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const auto [dx, dy] = oracle::tracked_flow(rs, smp.crop_x + gx * 8 + x, smp.crop_y + gy * 8 + y,
                                                     smp.indices[static_cast<std::size_t>(fr)],
                                                     smp.indices[static_cast<std::size_t>(fr) + 1]);
          EXPECT_EQ(ft.values(r, (y * 8 + x) * 2), dx);
          EXPECT_EQ(ft.values(r, (y * 8 + x) * 2 + 1), dy);
        }
    }
  }

  SceneSpec still = s;
  still.objects[0].vx = 0;
  const AnnotatedClip sc = generate_clip(still);
  EXPECT_TRUE(target_flow(sc, sample_frames(sc, 4, SampleMode::kEval, 32, 0), full_mask({4, 2, 2})).values.isZero());
  EXPECT_EQ(code_of([&] { target_flow(clip, sample_frames(clip, 1, SampleMode::kEval, 32, 0), full_mask({1, 2, 2})); }),
            ErrorCode::kUnsupportedTarget);
}

TEST(Vq, AssignmentMatchesExhaustiveScan) {
  Matrix descriptors(0, 48);
  std::vector<Array4d> clips;
  for (std::uint64_t s = 0; s < 6; ++s) {
    clips.push_back(random_frames(2, 16, 200 + s));
    const Matrix d = patch_descriptors(clips.back(), 8);
    descriptors.conservativeResize(descriptors.rows() + d.rows(), 48);
    descriptors.bottomRows(d.rows()) = d;
  }
  const Codebook book = build_codebook(descriptors, 8, 4);
  EXPECT_EQ(book.size(), 8);
  std::set<std::vector<double>> distinct;
  for (Eigen::Index k = 0; k < 8; ++k)
    distinct.insert(std::vector<double>(book.centroids().row(k).data(), book.centroids().row(k).data() + 48));
  EXPECT_EQ(distinct.size(), 8u);
  for (const auto& f : clips) {
    const TargetTensor t = quantize(f, full_mask({2, 2, 2}), book);
    ASSERT_EQ(t.classes.size(), 8u);
    EXPECT_EQ(t.loss, LossKind::kCrossEntropy);
    for (int r = 0; r < 8; ++r)
      EXPECT_EQ(t.classes[static_cast<std::size_t>(r)],
                oracle::nearest_centroid(f, r / 4, ((r % 4) / 2) * 8, (r % 2) * 8, 8, book.centroids()));
  }
  for (int k = 0; k < 8; ++k) {
    const Array4d patch = book.reconstruct(k, 8);
    EXPECT_EQ(quantize(patch, full_mask({1, 1, 1}), book).classes.front(), k);
  }
  EXPECT_TRUE(build_codebook(descriptors, 8, 4).centroids() == book.centroids());
  EXPECT_TRUE(Codebook::from_json(book.to_json()).centroids() == book.centroids());
}

TEST(Vq, BlackWhiteSeparationAndDegenerateError) {
  Array4d f(1, 16, 16, 3, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) f(0, y, x, c) = 1.0;
  const Codebook book = build_codebook(patch_descriptors(f, 8), 2, 1);
  const TargetTensor t = quantize(f, full_mask({1, 2, 2}), book);
  EXPECT_EQ(t.classes[0], t.classes[1]);
  EXPECT_EQ(t.classes[2], t.classes[3]);
  EXPECT_NE(t.classes[0], t.classes[2]);
  EXPECT_EQ(code_of([&] { build_codebook(patch_descriptors(f, 8), 3, 1); }), ErrorCode::kDegenerateCodebook);
  EXPECT_THROW(build_codebook(patch_descriptors(f, 8), 1, 1), Error);
}

TEST(Teacher, StandardizedDeterministicAndGridChecked) {
  const Array4d f = random_frames(4, 16, 9);
  const PatchMask m = random_mask({4, 2, 2}, 0.5, 2);
  for (TargetKind kind : {TargetKind::kSif, TargetKind::kTvf, TargetKind::kMmf}) {
    const Teacher teacher = Teacher::make(teacher_arity_for(kind), 8, 12, 77);
    const TargetTensor t = target_teacher(f, m, teacher, kind);
    EXPECT_EQ(t.rows(), 8);
    for (int r = 0; r < t.rows(); ++r) {
      EXPECT_NEAR(t.values.row(r).mean(), 0.0, 1e-12);
      EXPECT_NEAR((t.values.row(r).array() - t.values.row(r).mean()).square().mean(), 1.0, 1e-9);
    }
    EXPECT_TRUE(target_teacher(f, m, Teacher::make(teacher_arity_for(kind), 8, 12, 77), kind).values == t.values);
  }
  // Video teacher: both frames of a cube share the feature.
  const Matrix video = Teacher::make(TeacherArity::kVideo, 8, 12, 3).features(f);
  EXPECT_TRUE(video.middleRows(0, 4) == video.middleRows(4, 4));
  EXPECT_FALSE(video.middleRows(4, 4) == video.middleRows(8, 4));
  // Image teacher: per frame, so identical frames give identical rows.
  Array4d repeated(2, 16, 16, 3);
  for (int t = 0; t < 2; ++t)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c) repeated(t, y, x, c) = f(0, y, x, c);
  const Matrix image = Teacher::make(TeacherArity::kImage, 8, 12, 3).features(repeated);
  EXPECT_TRUE(image.middleRows(0, 4) == image.middleRows(4, 4));

  EXPECT_EQ(code_of([&] { target_teacher(f, m, Teacher::make(TeacherArity::kImage, 4, 12, 1), TargetKind::kSif); }),
            ErrorCode::kInvalidTeacher);
  EXPECT_EQ(code_of([&] { target_teacher(f, m, Teacher::make(TeacherArity::kVideo, 8, 12, 1), TargetKind::kSif); }),
            ErrorCode::kInvalidTeacher);

  Teacher constant = Teacher::make(TeacherArity::kImage, 8, 12, 5);
  constant.mutable_params().at("teacher.w2").setZero();
  constant.mutable_params().at("teacher.b2").setConstant(0.25);
  EXPECT_EQ(code_of([&] { target_teacher(f, m, constant, TargetKind::kSif); }), ErrorCode::kDegenerateTarget);
}

TEST(Teacher, SaveLoadRoundTrip) {
  const Teacher t = Teacher::make(TeacherArity::kMultimodalImage, 8, 6, 12);
  const auto dir = std::filesystem::temp_directory_path() / "violet_test_teacher";
  std::filesystem::remove_all(dir);
  t.save(dir);
  const Teacher back = Teacher::load(dir);
  EXPECT_TRUE(back.params() == t.params());
  EXPECT_EQ(back.arity(), t.arity());
  EXPECT_EQ(back.feature_dim(), 6);
  std::filesystem::remove_all(dir);
}

TEST(ExtractTarget, DispatchesAndReportsMissingResources) {
  RandomSceneOptions opt;
  opt.canvas_size = 16;
  opt.frame_count = 4;
  const AnnotatedClip clip = generate_clip(random_scene(3, opt));
  const FrameSample sample = sample_frames(clip, 2, SampleMode::kEval, 16, 0);
  const PatchMask m = random_mask({2, 2, 2}, 0.5, 1);
  TargetSources src;
  src.sample = &sample;
  for (TargetKind kind : {TargetKind::kFlow, TargetKind::kVq, TargetKind::kSif, TargetKind::kTvf, TargetKind::kMmf})
    EXPECT_EQ(code_of([&] { extract_target(kind, src, m); }), ErrorCode::kUnsupportedTarget) << to_string(kind);
  const TargetTensor pixel = extract_target(TargetKind::kPixel, src, m, LossKind::kL2);
  EXPECT_EQ(pixel.loss, LossKind::kL2);
  EXPECT_EQ(pixel.rows(), m.count());
  src.clip = &clip;
  EXPECT_EQ(extract_target(TargetKind::kFlow, src, m).values.cols(), target_dim(TargetKind::kFlow, 8));
  EXPECT_EQ(extract_target(TargetKind::kDepth, src, m).values.cols(), target_dim(TargetKind::kDepth, 8));
  for (TargetKind k : all_target_kinds()) EXPECT_EQ(target_kind_from_string(to_string(k)), k);
  EXPECT_EQ(loss_kind_for(TargetKind::kVq, LossKind::kL2), LossKind::kCrossEntropy);
}

}  // namespace
}  // namespace violet
