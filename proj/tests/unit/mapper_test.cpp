#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <gtest/gtest.h>

#include "jointvo/error.hpp"
#include "jointvo/harness/synthetic_scene.hpp"
#include "jointvo/mapper.hpp"
#include "scene_support.hpp"
#include "test_support.hpp"

namespace jointvo {
namespace {

using testing::Gen;

// --- keyframe decision -----------------------------------------------------------------------

Keyframe bare_keyframe(KeyframeId id, const Pose& pose = Pose()) {
  Keyframe kf;
  kf.id = id;
  kf.pose = pose;
  return kf;
}

TEST(KeyframeDecision, IdenticalFrameDoesNotTrigger) {
  TrackResult track;
  track.attempted_photometric = 500;
  track.n_p = 500;
  EXPECT_FALSE(keyframe_decision(track, AffineBrightness{}, bare_keyframe(0), MapperConfig{}));
}

TEST(KeyframeDecision, LargeFlowTriggers) {
  TrackResult track;
  track.attempted_photometric = 500;
  track.n_p = 500;
  track.rms_flow = 30.0;
  EXPECT_TRUE(keyframe_decision(track, AffineBrightness{}, bare_keyframe(0), MapperConfig{}));
  // 0.06 * 16 < 1 <= 0.06 * 17.
  track.rms_flow = 16.0;
  EXPECT_FALSE(keyframe_decision(track, AffineBrightness{}, bare_keyframe(0), MapperConfig{}));
  track.rms_flow = 17.0;
  EXPECT_TRUE(keyframe_decision(track, AffineBrightness{}, bare_keyframe(0), MapperConfig{}));
}

TEST(KeyframeDecision, BrightnessChangeTriggers) {
  TrackResult track;
  track.attempted_photometric = 100;
  track.n_p = 100;
  AffineBrightness frame;
  frame.a = 4.0;
  EXPECT_FALSE(keyframe_decision(track, frame, bare_keyframe(0), MapperConfig{}));
  frame.a = 6.0;
  EXPECT_TRUE(keyframe_decision(track, frame, bare_keyframe(0), MapperConfig{}));
}

TEST(KeyframeDecision, OcclusionTriggers) {
  TrackResult track;
  track.attempted_photometric = 400;
  track.n_p = 200;
  EXPECT_TRUE(keyframe_decision(track, AffineBrightness{}, bare_keyframe(0), MapperConfig{}));
  track.n_p = 241;
  EXPECT_FALSE(keyframe_decision(track, AffineBrightness{}, bare_keyframe(0), MapperConfig{}));
}

// --- depth hypothesis ------------------------------------------------------------------------

TEST(DepthHypothesis, FusionIsProductOfGaussians) {
  DepthHypothesis h{1.0, 0.04, 0};
  h.fuse(1.2, 0.04);
  EXPECT_NEAR(h.idepth, 1.1, 1e-12);
  EXPECT_NEAR(h.idepth_variance, 0.02, 1e-12);
  EXPECT_EQ(h.num_observations, 1);
}

TEST(DepthHypothesis, VarianceNeverIncreases) {
  Gen gen(11);
  for (int trial = 0; trial < 200; ++trial) {
    DepthHypothesis h{gen.uniform(0.1, 2.0), gen.uniform(1e-4, 1.0), 0};
    for (int k = 0; k < 20; ++k) {
      const double before = h.idepth_variance;
      const int count = h.num_observations;
      h.fuse(gen.uniform(0.1, 2.0), gen.uniform(1e-6, 10.0));
      ASSERT_LE(h.idepth_variance, before);
      ASSERT_EQ(h.num_observations, count + 1);
    }
  }
}

// --- candidate depth filter ------------------------------------------------------------------

CameraIntrinsics plane_camera() {
  CameraIntrinsics c;
  c.fu = c.fv = 300.0;
  c.cu = 159.5;
  c.cv = 119.5;
  c.width = 320;
  c.height = 240;
  return c;
}

Pose camera_at(const Vector3& center) { return Pose(Matrix3::Identity(), -center); }

// A textured wall at z = depth, optionally with a nearer textured panel, seen by cameras at
// `centers` looking along +z.
SyntheticScene plane_scene(double depth, const std::vector<Vector3>& centers, bool with_panel = false) {
  SyntheticScene scene;
  scene.intrinsics = plane_camera();
  scene.num_levels = 3;
  scene.surfaces.push_back(make_plane(Vector3(-3.0, -2.0, depth), Vector3::UnitX(), Vector3::UnitY(), 6.0, 4.0,
                                      TextureSpec{TextureKind::kRich, 21}, 0.004));
  if (with_panel) {
    scene.surfaces.push_back(make_plane(Vector3(0.2, -2.0, 1.5), Vector3::UnitX(), Vector3::UnitY(), 1.5, 4.0,
                                        TextureSpec{TextureKind::kRich, 99}, 0.004));
  }
  std::vector<Pose> poses;
  for (const Vector3& c : centers) poses.push_back(camera_at(c));
  testing::set_trajectory(scene, poses);
  return scene;
}

// Host keyframe of frame 0 with candidates at the given pixels, initialized at `bias` times
// their true inverse depth with relative sigma `sigma`.
LocalMap candidate_map(const SyntheticScene& scene, const std::vector<Vector2>& pixels, double bias, double sigma) {
  const RenderedFrame host = render_frame(scene, 0);
  LocalMap map;
  Keyframe kf;
  kf.id = map.allocate_keyframe_id();
  kf.pyramid = host.pyramid;
  kf.pose = scene.frames[0].pose;
  for (const Vector2& p : pixels) {
    Feature f(FeatureKind::kPixel, p);
    f.id = map.allocate_feature_id();
    f.host_keyframe = kf.id;
    const double truth = host.idepth_at(static_cast<int>(p.x()), static_cast<int>(p.y()));
    f.idepth = bias * truth;
    f.idepth_variance = std::pow(sigma * truth, 2);
    f.patch = extract_patch(host.pyramid->level(0), p);
    kf.features.push_back(std::move(f));
  }
  map.hybrid.push_back(std::move(kf));
  return map;
}

// Strongest-gradient pixel of every 16 px cell in the central part of the host frame.
std::vector<Vector2> textured_pixels(const SyntheticScene& scene) {
  const RenderedFrame host = render_frame(scene, 0);
  const ImagePlane& plane = host.pyramid->level(0);
  std::vector<Vector2> out;
  for (int y0 = 32; y0 + 16 <= plane.height() - 32; y0 += 16) {
    for (int x0 = 48; x0 + 16 <= plane.width() - 48; x0 += 16) {
      Vector2 best(x0, y0);
      double best_g = 0.0;
      for (int v = y0; v < y0 + 16; ++v) {
        for (int u = x0; u < x0 + 16; ++u) {
          const double g = std::hypot(plane.grad_u(u, v), plane.grad_v(u, v));
          if (g > best_g) {
            best_g = g;
            best = Vector2(u, v);
          }
        }
      }
      if (best_g > 20.0) out.push_back(best);
    }
  }
  return out;
}

TEST(CandidateDepths, ConvergesOverSmallBaselines) {
  const double depth = 2.0;
  std::vector<Vector3> centers;
  for (int i = 0; i <= 10; ++i) centers.emplace_back(0.01 * depth * i, 0.0, 0.0);
  const SyntheticScene scene = plane_scene(depth, centers);
  const std::vector<Vector2> pixels = textured_pixels(scene);
  ASSERT_GE(pixels.size(), 30u);
  LocalMap map = candidate_map(scene, pixels, 1.15, 0.3);
  std::vector<double> initial_variance;
  for (const Feature& f : map.newest().features) initial_variance.push_back(f.idepth_variance);

  const Config config;
  for (std::size_t i = 1; i < scene.frames.size(); ++i) {
    const RenderedFrame frame = render_frame(scene, i);
    update_candidate_depths(map, *frame.pyramid, scene.frames[i].pose, AffineBrightness{}, 4.0, config);
  }
  int good = 0;
  int total = 0;
  for (std::size_t k = 0; k < map.newest().features.size(); ++k) {
    const Feature& f = map.newest().features[k];
    if (f.status() != FeatureStatus::kCandidate) continue;
    ++total;
    if (std::abs(f.idepth * depth - 1.0) < 0.02 && f.idepth_variance * 10.0 <= initial_variance[k]) ++good;
  }
  EXPECT_GE(total, static_cast<int>(0.9 * pixels.size()));
  EXPECT_GE(good, static_cast<int>(0.9 * total)) << good << " of " << total;
}

TEST(CandidateDepths, PureRotationLeavesDepthUntouched) {
  const SyntheticScene scene = plane_scene(2.0, {Vector3::Zero(), Vector3::Zero()});
  SyntheticScene rotated = scene;
  rotated.frames[1].pose = Pose(exp(Vector6(0, 0, 0, 0, 0.02, 0.01)).rotation(), Vector3::Zero());
  const std::vector<Vector2> pixels = textured_pixels(rotated);
  LocalMap map = candidate_map(rotated, pixels, 1.1, 0.3);
  const std::vector<Feature> before = map.newest().features;
  const RenderedFrame frame = render_frame(rotated, 1);
  const DepthUpdateStats stats =
      update_candidate_depths(map, *frame.pyramid, rotated.frames[1].pose, AffineBrightness{}, 4.0, Config{});
  EXPECT_EQ(stats.skipped_baseline, static_cast<int>(pixels.size()));
  for (std::size_t k = 0; k < before.size(); ++k) {
    EXPECT_EQ(map.newest().features[k].idepth, before[k].idepth);
    EXPECT_EQ(map.newest().features[k].idepth_variance, before[k].idepth_variance);
    EXPECT_EQ(map.newest().features[k].status(), FeatureStatus::kCandidate);
  }
}

TEST(CandidateDepths, OccludedCandidateBecomesOutlier) {
  // Wall point at x = 0.3 (depth 3) disappears behind the panel edge x = 0.2 (depth 1.5) once
  // the camera passes x = 0.1.
  std::vector<Vector3> centers;
  for (int i = 0; i <= 6; ++i) centers.emplace_back(0.04 * i, 0.0, 0.0);
  const SyntheticScene scene = plane_scene(3.0, centers, true);
  const CameraIntrinsics camera = plane_camera();
  const Vector2 p(camera.fu * 0.1 + camera.cu, camera.cv + 10.0);
  LocalMap map = candidate_map(scene, {p}, 1.0, 0.05);
  const Config config;
  std::optional<std::size_t> flagged;
  for (std::size_t i = 1; i < scene.frames.size() && !flagged; ++i) {
    const RenderedFrame frame = render_frame(scene, i);
    update_candidate_depths(map, *frame.pyramid, scene.frames[i].pose, AffineBrightness{}, 4.0, config);
    if (map.newest().features[0].status() == FeatureStatus::kOutlier) flagged = i;
  }
  ASSERT_TRUE(flagged.has_value());
  EXPECT_LE(*flagged, 5u);
  EXPECT_GE(*flagged, 3u) << "flagged before the occlusion";
}

// --- photometric bundle adjustment -----------------------------------------------------------

SyntheticScene ba_scene(bool full_resolution = false) {
  SceneOptions o = full_resolution ? SceneOptions{} : testing::small_scene_options(40);
  o.frames = 40;
  o.noise = 0.0;
  return make_scene(o);
}

TEST(PhotometricBa, ExactFixedPointTakesNoStep) {
  const SyntheticScene scene = ba_scene();
  const Config config;
  LocalMap map = testing::make_window(scene, {0, 4}, config, 60);
  map.hybrid[1].features.clear();
  // Host patches copied from the target image at the true warp through the inverse brightness
  // model: every residual is zero.
  const Keyframe& target = map.hybrid[1];
  const Keyframe& host = map.hybrid[0];
  const Pose target_from_host = target.pose * host.pose.inverse();
  const double ratio = brightness_ratio(target.affine, host.affine);
  auto& features = map.hybrid[0].features;
  std::erase_if(features, [&](const Feature& f) {
    return !try_warp(target.pyramid->intrinsics(0), target_from_host, f.p, f.idepth, kDefaultImageBorder + 3.0).ok();
  });
  ASSERT_GE(features.size(), 30u);
  for (Feature& f : features) {
    for (PatchSample& s : f.patch) {
      const WarpOutcome w = try_warp(target.pyramid->intrinsics(0), target_from_host, f.p + s.offset, f.idepth);
      ASSERT_TRUE(w.ok());
      const double observed = sample_intensity_unchecked(target.pyramid->level(0), w.point.p);
      s.intensity = (observed - target.affine.b) / ratio + host.affine.b;
    }
  }
  const LocalMap before = map;
  const BaResult result = photometric_ba(map, config);
  EXPECT_EQ(result.accepted, 0);
  EXPECT_EQ(result.initial_energy, result.final_energy);
  EXPECT_NEAR(result.final_energy, 0.0, 1e-12);
  EXPECT_EQ(map.hybrid[1].pose.matrix(), before.hybrid[1].pose.matrix());
  for (std::size_t k = 0; k < map.hybrid[0].features.size(); ++k) {
    EXPECT_EQ(map.hybrid[0].features[k].idepth, before.hybrid[0].features[k].idepth);
  }
}

TEST(PhotometricBa, RecoversPerturbedWindow) {
  const SyntheticScene scene = ba_scene(true);
  const Config config;
  // Consecutive frames: a 5% depth error then moves a point by well under a texture period.
  LocalMap map = testing::make_window(scene, {0, 1, 2, 3}, config, 150);
  // The anchor is the lowest-variance depth; keep it at the truth.
  map.hybrid[0].features[0].idepth_variance = 1e-6;
  const LocalMap truth = map;
  double mean_depth = 0.0;
  int count = 0;
  for (const Keyframe& kf : map.hybrid) {
    for (const Feature& f : kf.features) {
      mean_depth += 1.0 / f.idepth;
      ++count;
    }
  }
  mean_depth /= count;

  Gen gen(5);
  for (std::size_t k = 1; k < map.hybrid.size(); ++k) {
    map.hybrid[k].pose = exp(gen.tangent(0.005 * mean_depth, 0.0)) * map.hybrid[k].pose;
  }
  for (Keyframe& kf : map.hybrid) {
    for (Feature& f : kf.features) {
      if (&f == &map.hybrid[0].features[0]) continue;
      f.idepth *= gen.coin() ? 1.05 : 0.95;
    }
  }
  const BaResult result = photometric_ba(map, config);
  for (std::size_t k = 1; k < result.energy_trace.size(); ++k) {
    EXPECT_LT(result.energy_trace[k], result.energy_trace[k - 1]);
  }

  for (std::size_t k = 1; k < map.hybrid.size(); ++k) {
    const double err = (map.hybrid[k].pose.center() - truth.hybrid[k].pose.center()).norm();
    EXPECT_LT(err, 1e-3 * mean_depth) << "keyframe " << k;
  }
  double sq = 0.0;
  int active = 0;
  for (std::size_t k = 0; k < map.hybrid.size(); ++k) {
    for (std::size_t i = 0; i < map.hybrid[k].features.size(); ++i) {
      const Feature& f = map.hybrid[k].features[i];
      if (f.status() != FeatureStatus::kActive) continue;
      const double rel = truth.hybrid[k].features[i].idepth / f.idepth - 1.0;
      sq += rel * rel;
      ++active;
    }
  }
  ASSERT_GT(active, count / 2);
  EXPECT_LT(std::sqrt(sq / active), 0.01);
}

TEST(PhotometricBa, SchurMatchesDenseSolve) {
  const SyntheticScene scene = ba_scene();
  const Config config;
  LocalMap map = testing::make_window(scene, {0, 3, 6}, config, 7);
  int features = 0;
  for (const Keyframe& kf : map.hybrid) features += static_cast<int>(kf.features.size());
  ASSERT_GE(features, 20);
  Gen gen(3);
  for (std::size_t k = 1; k < map.hybrid.size(); ++k) {
    map.hybrid[k].pose = exp(gen.tangent(0.01, 0.005)) * map.hybrid[k].pose;
  }
  const PhotometricBundle bundle(map, config);
  const BaNormalEquations system = bundle.linearize();
  EXPECT_EQ(system.H_cc.rows(), 16);
  for (double lambda : {0.0, 1e-4, 1.0}) {
    const auto [schur_c, schur_d] = solve_schur(system, lambda);
    const auto [dense_c, dense_d] = solve_dense(system, lambda);
    const double scale = std::max(1.0, dense_c.norm() + dense_d.norm());
    EXPECT_LT((schur_c - dense_c).norm() / scale, 1e-8) << "lambda " << lambda;
    EXPECT_LT((schur_d - dense_d).norm() / scale, 1e-8) << "lambda " << lambda;
  }
}

TEST(PhotometricBa, DegenerateWindowThrows) {
  const SyntheticScene scene = ba_scene();
  LocalMap map = testing::make_window(scene, {0, 4}, Config{}, 60);
  for (Keyframe& kf : map.hybrid) kf.features.clear();
  try {
    photometric_ba(map, Config{});
    FAIL() << "expected kSingularHessian";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSingularHessian);
  }
}

// --- structure-only optimization -------------------------------------------------------------

struct StructureProblem {
  CameraIntrinsics camera = testing::test_camera(640, 480, 400);
  Pose host;
  Vector2 p;
  double idepth = 0.0;
  std::vector<std::pair<Pose, Vector2>> observations;
};

StructureProblem structure_problem(Gen& gen, int count, double noise) {
  StructureProblem s;
  s.p = Vector2(gen.uniform(150, 490), gen.uniform(120, 360));
  s.idepth = gen.uniform(0.2, 1.0);
  for (int i = 0; i < count; ++i) {
    const Pose pose = exp(gen.tangent(0.3, 0.05));
    const WarpOutcome w = try_warp(s.camera, pose, s.p, s.idepth, 0.0);
    if (!w.ok()) continue;
    s.observations.emplace_back(pose, w.point.p + Vector2(gen.normal(noise), gen.normal(noise)));
  }
  return s;
}

TEST(StructureOnly, RecoversExactDepth) {
  Gen gen(17);
  for (int trial = 0; trial < 50; ++trial) {
    const StructureProblem s = structure_problem(gen, 4, 0.0);
    if (s.observations.size() < 2) continue;
    const auto d = refine_idepth(s.p, 1.2 * s.idepth, s.host, s.observations, s.camera, 1.5, 5);
    ASSERT_TRUE(d.has_value());
    EXPECT_LT(std::abs(*d / s.idepth - 1.0), 1e-6);
  }
}

TEST(StructureOnly, SingleObservationIsUnderConstrained) {
  Gen gen(2);
  StructureProblem s = structure_problem(gen, 1, 0.0);
  ASSERT_EQ(s.observations.size(), 1u);
  EXPECT_FALSE(refine_idepth(s.p, s.idepth * 1.1, s.host, s.observations, s.camera, 1.5, 5).has_value());
}

TEST(StructureOnly, HuberLimitsGrossOutlier) {
  Gen gen(23);
  double clean_sq = 0.0;
  double dirty_sq = 0.0;
  int trials = 0;
  while (trials < 200) {
    StructureProblem s = structure_problem(gen, 6, 0.5);
    if (s.observations.size() != 6) continue;
    std::vector<std::pair<Pose, Vector2>> clean(s.observations.begin(), s.observations.end() - 1);
    std::vector<std::pair<Pose, Vector2>> dirty = clean;
    dirty.emplace_back(s.observations.back().first, s.observations.back().second + Vector2(40.0, -30.0));
    const auto a = refine_idepth(s.p, s.idepth, s.host, clean, s.camera, 1.5, 5);
    const auto b = refine_idepth(s.p, s.idepth, s.host, dirty, s.camera, 1.5, 5);
    const double da = a ? *a : s.idepth;
    const double db = b ? *b : s.idepth;
    clean_sq += std::pow(da / s.idepth - 1.0, 2);
    dirty_sq += std::pow(db / s.idepth - 1.0, 2);
    ++trials;
  }
  EXPECT_LE(std::sqrt(dirty_sq / trials), 2.0 * std::sqrt(clean_sq / trials));
}

TEST(StructureOnly, RejectsIncreasingEnergy) {
  Gen gen(4);
  const StructureProblem s = structure_problem(gen, 3, 0.0);
  ASSERT_GE(s.observations.size(), 2u);
  // Already optimal: any returned value must not be worse.
  const auto d = refine_idepth(s.p, s.idepth, s.host, s.observations, s.camera, 1.5, 5);
  if (d) {
    EXPECT_NEAR(*d, s.idepth, 1e-9);
  }
}

TEST(StructureOnly, UpdatesMarginalizedCornersInMap) {
  Gen gen(8);
  const StructureProblem s = structure_problem(gen, 3, 0.0);
  ASSERT_EQ(s.observations.size(), 3u);
  LocalMap map;
  const CameraIntrinsics camera = s.camera;
  ImagePlane plane = testing::image_from(camera.width, camera.height, [](int, int) { return 100.0; });
  const ImagePyramidPtr pyramid = std::make_shared<ImagePyramid>(build_pyramid(plane, camera, 1.0, 2));
  for (int k = 0; k < 4; ++k) {
    Keyframe kf;
    kf.id = map.allocate_keyframe_id();
    kf.pyramid = pyramid;
    kf.pose = k == 0 ? s.host : s.observations[static_cast<std::size_t>(k - 1)].first;
    if (k > 0) kf.observations.push_back({1, s.observations[static_cast<std::size_t>(k - 1)].second});
    map.hybrid.push_back(std::move(kf));
  }
  Feature f(FeatureKind::kCorner, s.p);
  f.id = map.allocate_feature_id();
  f.host_keyframe = 0;
  f.idepth = 0.8 * s.idepth;
  f.transition_to(FeatureStatus::kActive);
  f.transition_to(FeatureStatus::kMarginalized);
  map.hybrid[0].features.push_back(f);
  EXPECT_EQ(structure_only_optimization(map, Config{}), 1);
  EXPECT_NEAR(map.hybrid[0].features[0].idepth / s.idepth, 1.0, 1e-6);
}

// --- marginalization and map invariants ------------------------------------------------------

Feature live_corner(LocalMap& map, KeyframeId host, FeatureStatus status) {
  Feature f(FeatureKind::kCorner, Vector2(50, 50));
  f.id = map.allocate_feature_id();
  f.host_keyframe = host;
  f.patch = std::vector<PatchSample>(kPatternSize);
  f.idepth = 0.5;
  f.idepth_variance = 1e-3;
  f.transition_to(FeatureStatus::kActive);
  if (status == FeatureStatus::kMarginalized) f.transition_to(FeatureStatus::kMarginalized);
  return f;
}

// W + 1 hybrid keyframes along a line. With `share_demoted`, the keyframe marginalization will
// pick hosts a corner that the newest keyframe observes.
LocalMap full_window(const MapperConfig& mc, bool share_demoted) {
  LocalMap map;
  for (int k = 0; k <= mc.window_size; ++k) {
    Keyframe kf = bare_keyframe(map.allocate_keyframe_id(), camera_at(Vector3(0.1 * k, 0.0, 0.0)));
    Feature f = live_corner(map, kf.id, FeatureStatus::kActive);
    kf.features.push_back(f);
    Feature p(FeatureKind::kPixel, Vector2(60, 60));
    p.id = map.allocate_feature_id();
    p.host_keyframe = kf.id;
    p.idepth_variance = 1e-3;
    p.transition_to(FeatureStatus::kActive);
    kf.features.push_back(p);
    map.hybrid.push_back(std::move(kf));
  }
  if (share_demoted) {
    const std::size_t index = select_marginalization(map, mc);
    map.newest().observations.push_back({map.hybrid[index].features[0].id});
  }
  return map;
}

TEST(Marginalize, RestoresWindowSizeAndDemotesOne) {
  const MapperConfig mc;
  LocalMap map = full_window(mc, true);
  const KeyframeId expected = map.hybrid[select_marginalization(map, mc)].id;
  const auto demoted = marginalize(map, mc);
  ASSERT_TRUE(demoted.has_value());
  EXPECT_EQ(*demoted, expected);
  EXPECT_EQ(static_cast<int>(map.hybrid.size()), mc.window_size);
  ASSERT_EQ(map.indirect.size(), 1u);
  const Keyframe& kf = map.indirect[0];
  EXPECT_EQ(kf.kind(), KeyframeKind::kIndirect);
  ASSERT_EQ(kf.features.size(), 1u);
  for (const Feature& f : kf.features) EXPECT_EQ(f.status(), FeatureStatus::kMarginalized);
  EXPECT_NO_THROW(audit(map, mc));
  EXPECT_FALSE(marginalize(map, mc).has_value());
}

TEST(Marginalize, UnsharedKeyframeLeavesTheMap) {
  const MapperConfig mc;
  LocalMap map = full_window(mc, false);
  const auto demoted = marginalize(map, mc);
  ASSERT_TRUE(demoted.has_value());
  EXPECT_TRUE(map.indirect.empty());
  EXPECT_EQ(map.find_keyframe(*demoted), nullptr);
  EXPECT_NO_THROW(audit(map, mc));
}

TEST(Marginalize, NeverDropsTheTwoNewest) {
  MapperConfig mc;
  Gen gen(31);
  for (int trial = 0; trial < 100; ++trial) {
    LocalMap map = full_window(mc, false);
    for (Keyframe& kf : map.hybrid) kf.pose = camera_at(gen.vec3(1.0));
    const std::size_t index = select_marginalization(map, mc);
    EXPECT_LT(index, map.hybrid.size() - 2);
  }
}

TEST(Marginalize, SparseKeyframeGoesFirst) {
  const MapperConfig mc;
  LocalMap map = full_window(mc, false);
  for (Feature& f : map.hybrid[4].features) f.transition_to(FeatureStatus::kOutlier);
  EXPECT_EQ(select_marginalization(map, mc), 4u);
}

TEST(Marginalize, RedundancyScoreOracle) {
  MapperConfig mc;
  Gen gen(41);
  for (int trial = 0; trial < 50; ++trial) {
    LocalMap map = full_window(mc, false);
    for (Keyframe& kf : map.hybrid) kf.pose = camera_at(gen.vec3(2.0));
    const std::size_t n = map.hybrid.size();
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t i = 0; i + 2 < n; ++i) {
      double score = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) score += 1.0 / ((map.hybrid[i].pose.center() - map.hybrid[j].pose.center()).norm() + 1e-3);
      }
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    EXPECT_EQ(select_marginalization(map, mc), best);
  }
}

TEST(Audit, DetectsViolations) {
  MapperConfig mc;
  mc.window_size = 3;
  LocalMap map = full_window(mc, true);
  EXPECT_THROW(audit(map, mc), std::logic_error) << "window too large";
  marginalize(map, mc);
  EXPECT_NO_THROW(audit(map, mc));

  LocalMap dup = map;
  dup.hybrid[1].features.push_back(dup.hybrid[1].features[0]);
  EXPECT_THROW(audit(dup, mc), std::logic_error);

  LocalMap orphan = map;
  orphan.newest().observations.clear();
  EXPECT_THROW(audit(orphan, mc), std::logic_error) << "indirect keyframe without shared corners";
}

TEST(Occupancy, SingleActivePointClaimsNineCells) {
  LocalMap map;
  const CameraIntrinsics camera = testing::test_camera(160, 120, 120);
  ImagePlane plane = testing::image_from(camera.width, camera.height, [](int, int) { return 100.0; });
  Keyframe kf = bare_keyframe(map.allocate_keyframe_id());
  kf.pyramid = std::make_shared<ImagePyramid>(build_pyramid(plane, camera, 1.0, 2));
  kf.features.push_back(live_corner(map, kf.id, FeatureStatus::kActive));
  Feature candidate(FeatureKind::kPixel, Vector2(120, 90));
  candidate.id = map.allocate_feature_id();
  candidate.host_keyframe = kf.id;
  kf.features.push_back(candidate);
  map.hybrid.push_back(std::move(kf));

  OccupancyGrid grid(camera.width, camera.height, 10);
  update_occupancy(grid, map, false);
  EXPECT_EQ(grid.occupied_count(), 9);
  for (int cy = 4; cy <= 6; ++cy) {
    for (int cx = 4; cx <= 6; ++cx) EXPECT_TRUE(grid.occupied(cx, cy));
  }
  update_occupancy(grid, map, true);
  EXPECT_EQ(grid.occupied_count(), 18);
}

// --- keyframe insertion ----------------------------------------------------------------------

TEST(InsertKeyframe, KeepsInvariantsOnSyntheticScene) {
  const SceneOptions options = testing::small_scene_options(40);
  const SyntheticScene scene = make_scene(options);
  Config config;
  config.mapper.window_size = 4;
  LocalMap map;
  for (std::size_t i = 0; i < 24; i += 3) {
    const RenderedFrame r = render_frame(scene, i);
    KeyframeInput input;
    input.frame_index = static_cast<int>(i);
    input.pyramid = r.pyramid;
    input.pose = scene.frames[i].pose;
    input.affine = scene.frames[i].affine;
    input.corners = detect_corners(*r.pyramid, config.features);
    input.sigma2_p = 4.0;
    const auto seed = [&](const Vector2& p) -> std::optional<double> {
      const double d = r.idepth_at(static_cast<int>(p.x()), static_cast<int>(p.y()));
      return d > 0.0 ? std::optional<double>(d) : std::nullopt;
    };
    const InsertionReport report = insert_keyframe(map, std::move(input), config, i == 0 ? seed : DepthSeed{});
    EXPECT_NO_THROW(audit(map, config.mapper));
    EXPECT_LE(static_cast<int>(map.hybrid.size()), config.mapper.window_size);
    if (i == 0) {
      EXPECT_GT(report.activated, 50);
    }

    // No two active points share a cell block in the newest keyframe.
    OccupancyGrid grid(options.width, options.height, config.features.cell_size);
    const Keyframe& newest = map.newest();
    for (const Keyframe& kf : map.hybrid) {
      const Pose rel = newest.pose * kf.pose.inverse();
      for (const Feature& f : kf.features) {
        if (f.status() != FeatureStatus::kActive) continue;
        const WarpOutcome w = try_warp(newest.pyramid->intrinsics(0), rel, f.p, f.idepth, 0.0);
        if (!w.ok()) continue;
        ASSERT_TRUE(grid.block_free(w.point.p)) << "overlapping active points after keyframe " << i;
        grid.mark_block(w.point.p);
      }
    }
  }
  EXPECT_TRUE(map.find_keyframe(0) == nullptr || map.find_keyframe(0)->kind() == KeyframeKind::kIndirect);
}

}  // namespace
}  // namespace jointvo
