#include <gtest/gtest.h>

#include <numbers>

#include "jointvo/error.hpp"
#include "jointvo/geometry.hpp"
#include "test_support.hpp"

namespace jointvo {
namespace {

using testing::Gen;

// Matrix exponential of the 4x4 twist by its truncated power series.
Matrix4 series_exp(const Tangent& v, int terms) {
  Matrix4 xi = Matrix4::Zero();
  xi.topLeftCorner<3, 3>() = hat(v.tail<3>());
  xi.topRightCorner<3, 1>() = v.head<3>();
  Matrix4 sum = Matrix4::Identity();
  Matrix4 term = Matrix4::Identity();
  for (int k = 1; k < terms; ++k) {
    term = term * xi / k;
    sum += term;
  }
  return sum;
}

void expect_pose_near(const Pose& a, const Pose& b, double tol) {
  EXPECT_LE((a.rotation() - b.rotation()).cwiseAbs().maxCoeff(), tol);
  EXPECT_LE((a.translation() - b.translation()).cwiseAbs().maxCoeff(), tol);
}

TEST(Exp, ZeroIsIdentity) {
  const Pose p = exp(Tangent::Zero());
  expect_pose_near(p, Pose::identity(), 0.0);
}

TEST(Exp, PureTranslation) {
  Tangent v = Tangent::Zero();
  v(0) = 1.0;
  const Pose p = exp(v);
  EXPECT_EQ(p.translation(), Vector3(1, 0, 0));
  EXPECT_EQ(p.rotation(), Matrix3::Identity());
}

TEST(Exp, QuarterTurnMatchesSeries) {
  Tangent v = Tangent::Zero();
  v(3) = std::numbers::pi / 2.0;
  const Matrix4 oracle = series_exp(v, 20);
  // The 20-term truncation error of a pi/2 series is ~(pi/2)^20/20! < 1e-14.
  EXPECT_LT((exp(v).matrix() - oracle).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(exp(v).rotation()(2, 1), 1.0, 1e-12);
}

TEST(Exp, RandomTwistsMatchSeries) {
  Gen gen(11);
  for (int i = 0; i < 200; ++i) {
    const Tangent v = gen.tangent(2.0, 2.0);
    EXPECT_LT((exp(v).matrix() - series_exp(v, 40)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Log, IdentityIsZero) { EXPECT_EQ(log(Pose::identity()), Tangent::Zero()); }

TEST(Log, InvertsExp) {
  Gen gen(12);
  for (int i = 0; i < 1000; ++i) {
    const Tangent v = gen.tangent(3.0, 3.0);
    EXPECT_LT((log(exp(v)) - v).cwiseAbs().maxCoeff(), 1e-9) << v.transpose();
  }
}

TEST(Log, SmallAngles) {
  Gen gen(13);
  for (int i = 0; i < 200; ++i) {
    const Tangent v = gen.tangent(1.0, 1e-7);
    EXPECT_LT((log(exp(v)) - v).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Log, NearPiThrows) {
  Tangent v = Tangent::Zero();
  v(4) = std::numbers::pi - 1e-9;
  try {
    log(exp(v));
    FAIL() << "expected AngleNearPi";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kAngleNearPi);
  }
}

TEST(Pose, RotationStaysOrthonormal) {
  Gen gen(14);
  for (int i = 0; i < 500; ++i) {
    const Pose p = exp(gen.tangent(5.0, 3.1));
    EXPECT_LT((p.rotation() * p.rotation().transpose() - Matrix3::Identity()).norm(), 1e-9);
    EXPECT_NEAR(p.rotation().determinant(), 1.0, 1e-9);
  }
}

TEST(Pose, ComposeWithInverseIsIdentity) {
  Gen gen(15);
  for (int i = 0; i < 500; ++i) {
    const Pose p = exp(gen.tangent(5.0, 3.1));
    expect_pose_near(p * p.inverse(), Pose::identity(), 1e-9);
    expect_pose_near(p.inverse() * p, Pose::identity(), 1e-9);
  }
}

TEST(Pose, AdjointConjugatesExp) {
  Gen gen(16);
  for (int i = 0; i < 200; ++i) {
    const Pose t = exp(gen.tangent(2.0, 2.5));
    const Tangent v = gen.tangent(0.5, 0.5);
    expect_pose_near(exp(t.adjoint() * v), t * exp(v) * t.inverse(), 1e-9);
  }
}

TEST(Boxplus, ZeroIncrement) {
  Gen gen(17);
  const Pose p = exp(gen.tangent(1.0, 1.0));
  expect_pose_near(boxplus(Tangent::Zero(), p), p, 1e-15);
}

TEST(Boxplus, OnIdentityIsExp) {
  Gen gen(18);
  const Tangent v = gen.tangent(1.0, 1.0);
  expect_pose_near(boxplus(v, Pose::identity()), exp(v), 1e-15);
}

TEST(Boxplus, ComposesLikeTheGroup) {
  Gen gen(19);
  for (int i = 0; i < 300; ++i) {
    const Pose p = exp(gen.tangent(2.0, 2.0));
    const Tangent v1 = gen.tangent(0.5, 0.8);
    const Tangent v2 = gen.tangent(0.5, 0.8);
    const Tangent composed = log(exp(v2) * exp(v1));
    expect_pose_near(boxplus(v2, boxplus(v1, p)), boxplus(composed, p), 1e-9);
  }
}

TEST(Oplus, ZeroDeltaKeepsState) {
  FrameState s;
  s.pose_tangent << 0.1, -0.2, 0.3, 0.05, 0.02, -0.01;
  s.affine = {0.3, -4.0, 1.5};
  const FrameState out = oplus(StateIncrement::Zero(), s);
  EXPECT_LT((out.pose_tangent - s.pose_tangent).norm(), 1e-12);
  EXPECT_EQ(out.affine.a, s.affine.a);
  EXPECT_EQ(out.affine.b, s.affine.b);
  EXPECT_EQ(out.affine.t, s.affine.t);
}

TEST(Oplus, AffineOnlyUpdate) {
  FrameState s;
  s.pose_tangent << 0.1, 0.0, 0.2, 0.0, 0.1, 0.0;
  StateIncrement d = StateIncrement::Zero();
  d(6) = 0.1;
  d(7) = 2.0;
  const FrameState out = oplus(d, s);
  EXPECT_LT((out.pose_tangent - s.pose_tangent).norm(), 1e-12);
  EXPECT_DOUBLE_EQ(out.affine.a, 0.1);
  EXPECT_DOUBLE_EQ(out.affine.b, 2.0);
}

TEST(Oplus, SuccessiveIncrementsCompose) {
  Gen gen(20);
  for (int i = 0; i < 200; ++i) {
    FrameState s;
    s.pose_tangent = gen.tangent(1.0, 1.0);
    StateIncrement d1 = StateIncrement::Zero();
    StateIncrement d2 = StateIncrement::Zero();
    d1.head<6>() = gen.tangent(0.2, 0.3);
    d2.head<6>() = gen.tangent(0.2, 0.3);
    const FrameState twice = oplus(d2, oplus(d1, s));
    StateIncrement once = StateIncrement::Zero();
    once.head<6>() = log(exp(d2.head<6>()) * exp(d1.head<6>()));
    expect_pose_near(twice.pose(), oplus(once, s).pose(), 1e-9);
  }
}

TEST(Affine, ZeroIsIdentityMap) {
  const AffineBrightness l{0.0, 0.0, 1.0};
  for (double i : {0.0, 17.5, 128.0, 255.0}) EXPECT_EQ(l.apply(i), i);
}

TEST(Affine, RatioOfGains) {
  const AffineBrightness host{0.1, 3.0, 2.0};
  const AffineBrightness target{-0.2, 1.0, 0.5};
  EXPECT_NEAR(brightness_ratio(target, host), 0.5 * std::exp(-0.2) / (2.0 * std::exp(0.1)), 1e-15);
  EXPECT_DOUBLE_EQ(brightness_ratio(host, host), 1.0);
}

TEST(Project, OpticalAxis) {
  const CameraIntrinsics c{100, 100, 50, 50, 101, 101};
  EXPECT_EQ(project(c, Vector3(0, 0, 1)), Vector2(50, 50));
}

TEST(Project, HandEvaluatedPinhole) {
  const CameraIntrinsics c{100, 100, 50, 50, 101, 101};
  EXPECT_EQ(project(c, Vector3(1, 0, 2)), Vector2(100, 50));
}

TEST(Project, BehindCameraThrows) {
  const CameraIntrinsics c{100, 100, 50, 50, 101, 101};
  try {
    project(c, Vector3(0, 0, -1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBehindCamera);
  }
}

TEST(Backproject, PrincipalPoint) {
  const CameraIntrinsics c{100, 100, 50, 50, 101, 101};
  EXPECT_EQ(backproject(c, Vector2(50, 50), 1.0), Vector3(0, 0, 1));
}

TEST(Backproject, InverseOfPinholeExample) {
  const CameraIntrinsics c{100, 100, 50, 50, 101, 101};
  EXPECT_LT((backproject(c, Vector2(100, 50), 0.5) - Vector3(1, 0, 2)).norm(), 1e-15);
}

TEST(Backproject, RoundTrip) {
  Gen gen(21);
  const CameraIntrinsics c = testing::test_camera(640, 480, 400);
  for (int i = 0; i < 1000; ++i) {
    const Vector2 p(gen.uniform(0, 639), gen.uniform(0, 479));
    const double d = gen.uniform(0.01, 10.0);
    EXPECT_LT((project(c, backproject(c, p, d)) - p).norm(), 1e-9);
  }
}

TEST(Backproject, NonPositiveDepthThrows) {
  const CameraIntrinsics c{100, 100, 50, 50, 101, 101};
  EXPECT_THROW(backproject(c, Vector2(10, 10), 0.0), Error);
  EXPECT_THROW(backproject(c, Vector2(10, 10), -1.0), Error);
}

TEST(Warp, IdentityState) {
  const CameraIntrinsics c = testing::test_camera();
  const WarpedPoint w = warp(c, FrameState{}, Vector2(40.25, 33.5), 0.7);
  EXPECT_LT((w.p - Vector2(40.25, 33.5)).norm(), 1e-12);
  EXPECT_NEAR(w.idepth, 0.7, 1e-12);
}

TEST(Warp, BackwardTranslationAlongAxis) {
  const CameraIntrinsics c = testing::test_camera();
  FrameState s;
  s.pose_tangent(2) = 0.5;  // target_from_host adds +0.5 to z: the camera moved back by 0.5
  const Vector2 center(c.cu, c.cv);
  const WarpedPoint w = warp(c, s, center, 1.0);
  EXPECT_LT((w.p - center).norm(), 1e-12);
  EXPECT_NEAR(w.idepth, 1.0 / 1.5, 1e-12);
}

TEST(Warp, InverseWarpReturns) {
  Gen gen(22);
  const CameraIntrinsics c = testing::test_camera(640, 480, 400);
  int checked = 0;
  for (int i = 0; i < 500; ++i) {
    FrameState s;
    s.pose_tangent = gen.tangent(0.1, 0.1);
    const Vector2 p(gen.uniform(50, 590), gen.uniform(50, 430));
    const double d = gen.uniform(0.2, 2.0);
    const WarpOutcome fwd = try_warp(c, s.pose(), p, d);
    if (!fwd.ok()) continue;
    const WarpOutcome back = try_warp(c, s.pose().inverse(), fwd.point.p, fwd.point.idepth, 0.0);
    ASSERT_TRUE(back.ok());
    EXPECT_LT((back.point.p - p).norm(), 1e-8);
    EXPECT_NEAR(back.point.idepth, d, 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 400);
}

TEST(Warp, StatusCodes) {
  const CameraIntrinsics c = testing::test_camera();
  FrameState s;
  s.pose_tangent(2) = -2.0;  // point at depth 1 ends up behind the camera
  EXPECT_EQ(try_warp(c, s.pose(), Vector2(c.cu, c.cv), 1.0).status, WarpStatus::kBehindCamera);
  EXPECT_EQ(try_warp(c, Pose(), Vector2(c.cu, c.cv), 0.0).status, WarpStatus::kNonPositiveDepth);
  FrameState shift;
  shift.pose_tangent(0) = 10.0;
  EXPECT_EQ(try_warp(c, shift.pose(), Vector2(c.cu, c.cv), 1.0).status, WarpStatus::kOutOfImage);
  try {
    warp(c, shift, Vector2(c.cu, c.cv), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOutOfImage);
  }
}

TEST(Intrinsics, LevelRoundTrip) {
  Gen gen(23);
  const CameraIntrinsics c = testing::test_camera(640, 480, 400);
  for (int l = 0; l < 4; ++l) {
    const CameraIntrinsics cl = c.at_level(l);
    EXPECT_DOUBLE_EQ(cl.fu * (1 << l), c.fu);
    EXPECT_EQ(cl.width, 640 >> l);
    for (int i = 0; i < 100; ++i) {
      const Vector3 x(gen.uniform(-1, 1), gen.uniform(-1, 1), gen.uniform(1, 4));
      // Projecting with level intrinsics agrees with projecting at level 0 and mapping down.
      EXPECT_LT((project(cl, x) - to_level(project(c, x), l)).norm(), 1e-9);
      EXPECT_LT((from_level(to_level(project(c, x), l), l) - project(c, x)).norm(), 1e-9);
    }
  }
}

TEST(Intrinsics, ValidateRejectsBadValues) {
  EXPECT_NO_THROW(testing::test_camera().validate());
  EXPECT_THROW((CameraIntrinsics{-1, 100, 50, 50, 100, 100}.validate()), Error);
  EXPECT_THROW((CameraIntrinsics{100, 100, 150, 50, 100, 100}.validate()), Error);
  EXPECT_THROW((CameraIntrinsics{100, 100, 50, 0, 100, 100}.validate()), Error);
}

}  // namespace
}  // namespace jointvo
