#include <gtest/gtest.h>

#include "jacobian_check.hpp"
#include "jointvo/error.hpp"
#include "jointvo/residuals.hpp"
#include "test_support.hpp"

namespace jointvo {
namespace {

using testing::Gen;
using testing::image_from;

PhotometricHost host_on(const ImagePlane& img, const Vector2& p, double idepth) {
  PhotometricHost host;
  host.p = p;
  host.idepth = idepth;
  for (int k = 0; k < kPatternSize; ++k) {
    host.intensities[k] = sample_intensity_unchecked(img, p + residual_pattern()[static_cast<std::size_t>(k)]);
  }
  return host;
}

TEST(Photometric, SelfResidualIsZero) {
  const ImagePlane img = image_from(160, 120, [](double u, double v) { return testing::smooth_field(u, v); });
  const CameraIntrinsics cam = testing::test_camera();
  const PhotometricBlock b = photometric_residual(host_on(img, Vector2(70.3, 40.7), 0.8), img, FrameState{}, cam, 9.0);
  ASSERT_TRUE(b.valid);
  EXPECT_LT(b.r.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(b.w, 1.0);
}

TEST(Photometric, AffineCompensation) {
  const auto f = [](double u, double v) { return testing::smooth_field(u, v); };
  const ImagePlane host_img = image_from(160, 120, f);
  const ImagePlane cur = image_from(160, 120, [&](double u, double v) { return std::exp(0.2) * f(u, v) + 5.0; });
  FrameState s;
  s.affine.a = 0.2;
  s.affine.b = 5.0;
  const PhotometricBlock b =
      photometric_residual(host_on(host_img, Vector2(81, 62), 1.0), cur, s, testing::test_camera(), 9.0);
  ASSERT_TRUE(b.valid);
  EXPECT_LT(b.r.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Photometric, GainIsAbsorbedByA) {
  // Scaling the current image by e^delta and adding delta to a_j scales every residual by
  // exactly e^delta; zero residuals stay zero.
  Gen gen(61);
  for (int trial = 0; trial < 50; ++trial) {
    const double phase = gen.uniform(0, 5);
    const double delta = gen.uniform(-0.5, 0.5);
    const ImagePlane cur = image_from(160, 120, [&](double u, double v) { return testing::smooth_field(u, v, phase); });
    const ImagePlane gained = image_from(160, 120, [&](double u, double v) {
      return std::exp(delta) * testing::smooth_field(u, v, phase);
    });
    PhotometricHost host = host_on(cur, Vector2(gen.uniform(40, 120), gen.uniform(30, 90)), 1.0);
    for (int k = 0; k < kPatternSize; ++k) host.intensities[k] += gen.normal(5.0);
    FrameState s;
    s.pose_tangent = gen.tangent(0.01, 0.01);
    s.affine.a = gen.uniform(-0.2, 0.2);
    FrameState s2 = s;
    s2.affine.a += delta;
    const PhotometricBlock a = photometric_residual(host, cur, s, testing::test_camera(), 9.0);
    const PhotometricBlock b = photometric_residual(host, gained, s2, testing::test_camera(), 9.0);
    ASSERT_TRUE(a.valid && b.valid);
    EXPECT_LT((b.r - std::exp(delta) * a.r).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, a.r.cwiseAbs().maxCoeff()));
  }
}

TEST(Photometric, InvalidWhenPatternLeavesImage) {
  const ImagePlane img = image_from(160, 120, [](double u, double v) { return testing::smooth_field(u, v); });
  FrameState s;
  s.pose_tangent(0) = 1.0;
  const PhotometricBlock b = photometric_residual(host_on(img, Vector2(80, 60), 1.0), img, s, testing::test_camera(), 9.0);
  EXPECT_FALSE(b.valid);
  PhotometricHost bad = host_on(img, Vector2(80, 60), 1.0);
  bad.idepth = -1.0;
  EXPECT_FALSE(photometric_residual(bad, img, FrameState{}, testing::test_camera(), 9.0).valid);
}

TEST(Photometric, JacobianMatchesFiniteDifferences) {
  const testing::JacobianReport r = testing::run_jacobian_suite(62, 100);
  EXPECT_LE(r.max_photometric, 1e-4);
  EXPECT_LE(r.max_geometric, 1e-5);
  EXPECT_LT(r.rejected, 100);
}

TEST(Photometric, AffineColumnsAreExact) {
  Gen gen(63);
  const testing::PhotometricConfiguration c = testing::random_photometric_configuration(gen);
  const PhotometricBlock b = photometric_residual(c.host, c.cur, c.state, c.camera, 9.0);
  ASSERT_TRUE(b.valid);
  const double ratio = brightness_ratio(c.state.affine, c.host.affine);
  for (int k = 0; k < kPatternSize; ++k) {
    EXPECT_NEAR(b.J(k, 6), -ratio * (c.host.intensities[k] - c.host.affine.b), 1e-12);
    EXPECT_EQ(b.J(k, 7), -1.0);
  }
}

TEST(Photometric, BlockWeightUsesMeanEnergy) {
  EXPECT_EQ(photometric_block_weight(8.0 * 80.0, 9.0), 1.0);
  EXPECT_DOUBLE_EQ(photometric_block_weight(8.0 * 324.0, 9.0), 0.5);
  // The robust cost is the Huber norm of the mean, scaled back to the block.
  EXPECT_DOUBLE_EQ(photometric_block_cost(8.0 * 80.0, 9.0), 8.0 * 80.0);
  EXPECT_DOUBLE_EQ(photometric_block_cost(8.0 * 324.0, 9.0), 8.0 * (2 * 9 * 18 - 81));
}

TEST(Geometric, ExactObservationHasZeroResidual) {
  const CameraIntrinsics cam = testing::test_camera(640, 480, 400);
  FrameState s;
  s.pose_tangent << 0.05, -0.02, 0.1, 0.01, 0.03, -0.02;
  const Vector2 p(300, 200);
  const WarpedPoint w = warp(cam, s, p, 0.5, 0.0);
  const GeometricBlock b = geometric_residual(p, 0.5, Pose(), w.p, s, cam, 1.0, 1.5);
  ASSERT_TRUE(b.valid);
  EXPECT_LT(b.r.norm(), 1e-12);
  EXPECT_EQ(b.w, 1.0);
}

TEST(Geometric, AffineColumnsAreZero) {
  Gen gen(64);
  const CameraIntrinsics cam = testing::test_camera(640, 480, 400);
  for (int i = 0; i < 100; ++i) {
    FrameState s;
    s.pose_tangent = gen.tangent(0.1, 0.1);
    const Vector2 p(gen.uniform(100, 540), gen.uniform(100, 380));
    const GeometricBlock b = geometric_residual(p, 1.0, Pose(), p, s, cam, 1.0, 1.5);
    if (!b.valid) continue;
    EXPECT_EQ(b.J.col(6), Vector2::Zero());
    EXPECT_EQ(b.J.col(7), Vector2::Zero());
  }
}

TEST(Geometric, InvariantToAffine) {
  Gen gen(65);
  const CameraIntrinsics cam = testing::test_camera(640, 480, 400);
  for (int i = 0; i < 100; ++i) {
    FrameState s;
    s.pose_tangent = gen.tangent(0.1, 0.1);
    const Vector2 p(gen.uniform(100, 540), gen.uniform(100, 380));
    const Vector2 obs = p + Vector2(gen.normal(3), gen.normal(3));
    FrameState t = s;
    t.affine = {gen.uniform(-1, 1), gen.uniform(-20, 20), gen.uniform(0.5, 2)};
    const GeometricBlock a = geometric_residual(p, 0.7, Pose(), obs, s, cam, 0.6, 1.5);
    const GeometricBlock b = geometric_residual(p, 0.7, Pose(), obs, t, cam, 0.6, 1.5);
    ASSERT_EQ(a.valid, b.valid);
    if (!a.valid) continue;
    EXPECT_EQ(a.r, b.r);
    EXPECT_EQ(a.J, b.J);
    EXPECT_EQ(a.w, b.w);
  }
}

TEST(Geometric, WeightCombinesDepthAndHuber) {
  const CameraIntrinsics cam = testing::test_camera(640, 480, 400);
  const Vector2 p(320, 240);
  const GeometricBlock b = geometric_residual(p, 1.0, Pose(), p + Vector2(6.0, 0.0), FrameState{}, cam, 0.5, 1.5);
  EXPECT_DOUBLE_EQ(b.w, 0.5 * 1.5 / 6.0);
}

TEST(IdepthJacobian, MatchesFiniteDifferences) {
  Gen gen(66);
  const CameraIntrinsics cam = testing::test_camera(640, 480, 400);
  for (int i = 0; i < 200; ++i) {
    const Pose t = exp(gen.tangent(0.3, 0.2));
    const Vector2 p(gen.uniform(100, 540), gen.uniform(100, 380));
    const double d = gen.uniform(0.2, 2.0);
    const WarpOutcome a = try_warp(cam, t, p, d + 1e-6, 0.0, 1e-3);
    const WarpOutcome b = try_warp(cam, t, p, d - 1e-6, 0.0, 1e-3);
    if (!a.ok() || !b.ok()) continue;
    const Vector2 numeric = (a.point.p - b.point.p) / 2e-6;
    const Vector2 analytic = idepth_jacobian(cam, t, p, d);
    EXPECT_LT((numeric - analytic).norm(), 1e-5 * std::max(1.0, analytic.norm()));
  }
}

TEST(Huber, Values) {
  EXPECT_EQ(huber_weight(0.0, 3.0), 1.0);
  EXPECT_EQ(huber_weight(9.0, 3.0), 1.0);
  EXPECT_DOUBLE_EQ(huber_weight(36.0, 3.0), 0.5);
  EXPECT_DOUBLE_EQ(huber_weight(9.0 * (1 + 1e-12), 3.0), 1.0 / std::sqrt(1 + 1e-12));
}

TEST(Huber, WeightIsDerivativeOfNorm) {
  Gen gen(67);
  for (int i = 0; i < 500; ++i) {
    const double gamma = gen.uniform(0.5, 10);
    const double e = gen.uniform(0, 4 * gamma * gamma);
    if (std::abs(e - gamma * gamma) < 1e-3) continue;
    const double h = 1e-6 * std::max(1.0, e);
    const double numeric = (huber_norm(e + h, gamma) - huber_norm(e - h, gamma)) / (2 * h);
    EXPECT_NEAR(numeric, huber_weight(e, gamma), 1e-6);
    const double w = huber_weight(e, gamma);
    EXPECT_GT(w, 0.0);
    EXPECT_LE(w, 1.0);
  }
}

TEST(DepthWeight, Values) {
  EXPECT_DOUBLE_EQ(depth_variance_weight(0.01, 1.0 / 0.01), 1.0);
  EXPECT_DOUBLE_EQ(depth_variance_weight(0.04, 1.0 / 0.01), 0.25);
  for (double v : {0.3, 0.3, 0.3}) EXPECT_DOUBLE_EQ(depth_variance_weight(v, 1.0 / 0.3), 1.0);
}

TEST(Variances, IdenticalResidualsHitTheFloor) {
  ResidualSystem sys;
  PhotometricBlock b;
  b.valid = true;
  b.r.setConstant(3.0);
  sys.photometric.assign(10, b);
  sys.recount();
  const auto [p, g] = estimate_variances(sys, 1e-4);
  EXPECT_EQ(p, 1e-4);
  EXPECT_EQ(g, 1e-4);
}

TEST(Variances, GaussianSample) {
  Gen gen(68);
  ResidualSystem sys;
  for (int i = 0; i < 1250; ++i) {
    PhotometricBlock b;
    b.valid = true;
    for (int k = 0; k < kPatternSize; ++k) b.r[k] = gen.normal(2.0);
    sys.photometric.push_back(b);
  }
  for (int i = 0; i < 5000; ++i) {
    GeometricBlock b;
    b.valid = true;
    b.r = Vector2(gen.normal(2.0), gen.normal(2.0));
    sys.geometric.push_back(b);
  }
  sys.recount();
  const auto [p, g] = estimate_variances(sys, 1e-4);
  EXPECT_NEAR(p, 4.0, 0.4);
  EXPECT_NEAR(g, 4.0, 0.4);
}

TEST(Variances, SingleOutlierIsIgnored) {
  std::vector<double> values(100, 0.0);
  values[17] = 1e6;
  EXPECT_EQ(mad_variance(values, 1e-4), 1e-4);
}

TEST(Variances, InvalidBlocksDoNotCount) {
  ResidualSystem sys;
  PhotometricBlock good;
  good.valid = true;
  PhotometricBlock bad;
  bad.r.setConstant(1e3);
  for (int i = 0; i < 10; ++i) {
    good.r.setConstant(static_cast<double>(i));
    sys.photometric.push_back(good);
  }
  const double clean = estimate_variances(sys, 1e-4).first;
  sys.photometric.push_back(bad);
  sys.photometric.push_back(bad);
  sys.recount();
  EXPECT_EQ(sys.n_p, 10);
  EXPECT_EQ(estimate_variances(sys, 1e-4).first, clean);
}

TEST(Variances, EmptySystemThrows) {
  ResidualSystem sys;
  sys.photometric.push_back(PhotometricBlock{});
  try {
    estimate_variances(sys, 1e-4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptySystem);
  }
}

}  // namespace
}  // namespace jointvo
