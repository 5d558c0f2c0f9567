#include "jointvo/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <numbers>

#include "jointvo/error.hpp"

namespace jointvo {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kAngleNearPi: return "AngleNearPi";
    case ErrorCode::kBehindCamera: return "BehindCamera";
    case ErrorCode::kNonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::kOutOfImage: return "OutOfImage";
    case ErrorCode::kImageTooSmall: return "ImageTooSmall";
    case ErrorCode::kEmptySystem: return "EmptySystem";
    case ErrorCode::kSingularHessian: return "SingularHessian";
    case ErrorCode::kTrackingLost: return "TrackingLost";
    case ErrorCode::kIllegalTransition: return "IllegalTransition";
    case ErrorCode::kNoSurfaceInView: return "NoSurfaceInView";
    case ErrorCode::kMalformedDataset: return "MalformedDataset";
    case ErrorCode::kInsufficientOverlap: return "InsufficientOverlap";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

void CameraIntrinsics::validate() const {
  if (!(fu > 0.0 && fv > 0.0)) throw Error(ErrorCode::kInvalidConfig, "focal lengths must be positive");
  if (width <= 0 || height <= 0) throw Error(ErrorCode::kInvalidConfig, "image size must be positive");
  if (!(cu > 0.0 && cu < width && cv > 0.0 && cv < height)) {
    throw Error(ErrorCode::kInvalidConfig, "principal point outside the image");
  }
}

CameraIntrinsics CameraIntrinsics::at_level(int level) const {
  const double scale = std::ldexp(1.0, -level);
  CameraIntrinsics c;
  c.fu = fu * scale;
  c.fv = fv * scale;
  c.cu = (cu + 0.5) * scale - 0.5;
  c.cv = (cv + 0.5) * scale - 0.5;
  c.width = width >> level;
  c.height = height >> level;
  return c;
}

Vector2 to_level(const Vector2& p0, int level) {
  const double scale = std::ldexp(1.0, -level);
  return ((p0.array() + 0.5) * scale - 0.5).matrix();
}

Vector2 from_level(const Vector2& pl, int level) {
  const double scale = std::ldexp(1.0, level);
  return ((pl.array() + 0.5) * scale - 0.5).matrix();
}

Pose Pose::from_quaternion(const Eigen::Quaterniond& q, const Vector3& t) {
  return Pose(q.normalized().toRotationMatrix(), t);
}

Matrix4 Pose::matrix() const {
  Matrix4 m = Matrix4::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

Matrix6 Pose::adjoint() const {
  Matrix6 ad = Matrix6::Zero();
  ad.topLeftCorner<3, 3>() = rotation_;
  ad.topRightCorner<3, 3>() = hat(translation_) * rotation_;
  ad.bottomRightCorner<3, 3>() = rotation_;
  return ad;
}

double Pose::angle() const {
  const Vector3 w(rotation_(2, 1) - rotation_(1, 2), rotation_(0, 2) - rotation_(2, 0),
                  rotation_(1, 0) - rotation_(0, 1));
  const double cos_theta = std::clamp(0.5 * (rotation_.trace() - 1.0), -1.0, 1.0);
  return std::atan2(0.5 * w.norm(), cos_theta);
}

Matrix3 hat(const Vector3& w) {
  Matrix3 m;
  m << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return m;
}

namespace {

constexpr double kSmallAngle = 1e-3;

// Coefficients A = sin/th, B = (1-cos)/th^2, C = (th-sin)/th^3.
struct SeriesCoefficients {
  double a;
  double b;
  double c;
};

SeriesCoefficients coefficients(double theta) {
  const double t2 = theta * theta;
  if (theta < kSmallAngle) {
    return {1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0};
  }
  const double s = std::sin(theta);
  const double c = std::cos(theta);
  return {s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)};
}

Vector3 so3_log(const Matrix3& r) {
  const Vector3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double sin_theta = 0.5 * w.norm();
  const double cos_theta = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  const double theta = std::atan2(sin_theta, cos_theta);

  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    return 0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0) * w;
  }
  if (cos_theta > -0.9) {
    return (0.5 * theta / sin_theta) * w;
  }
  // Near pi the antisymmetric part vanishes; recover the axis from the symmetric part.
  const Matrix3 s = (r + r.transpose() - 2.0 * cos_theta * Matrix3::Identity()) / (2.0 * (1.0 - cos_theta));
  int k = 0;
  s.diagonal().maxCoeff(&k);
  Vector3 axis = s.col(k) / std::sqrt(std::max(s(k, k), 1e-300));
  axis.normalize();
  if (axis.dot(w) < 0.0) axis = -axis;
  return theta * axis;
}

}  // namespace

Matrix3 so3_exp(const Vector3& w) {
  const double theta = w.norm();
  const SeriesCoefficients k = coefficients(theta);
  const Matrix3 wx = hat(w);
  return Matrix3::Identity() + k.a * wx + k.b * wx * wx;
}

Pose exp(const Tangent& v) {
  const Vector3 rho = v.head<3>();
  const Vector3 w = v.tail<3>();
  const double theta = w.norm();
  const SeriesCoefficients k = coefficients(theta);
  const Matrix3 wx = hat(w);
  const Matrix3 wx2 = wx * wx;
  const Matrix3 r = Matrix3::Identity() + k.a * wx + k.b * wx2;
  const Matrix3 jl = Matrix3::Identity() + k.b * wx + k.c * wx2;
  return Pose(r, jl * rho);
}

Tangent log(const Pose& pose) {
  const double theta = pose.angle();
  if (theta > std::numbers::pi - 1e-6) {
    throw Error(ErrorCode::kAngleNearPi, "rotation angle " + std::to_string(theta) + " is too close to pi");
  }
  const Vector3 w = so3_log(pose.rotation());
  const Matrix3 wx = hat(w);
  double d;
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    const SeriesCoefficients k = coefficients(theta);
    d = (1.0 - k.a / (2.0 * k.b)) / (theta * theta);
  }
  const Matrix3 jl_inv = Matrix3::Identity() - 0.5 * wx + d * wx * wx;
  Tangent v;
  v.head<3>() = jl_inv * pose.translation();
  v.tail<3>() = w;
  return v;
}

Pose boxplus(const Tangent& v, const Pose& pose) { return exp(v) * pose; }

double AffineBrightness::apply(double intensity) const { return std::exp(-a) * (intensity - b); }

double brightness_ratio(const AffineBrightness& target, const AffineBrightness& host) {
  return (target.t * std::exp(target.a)) / (host.t * std::exp(host.a));
}

FrameState oplus(const StateIncrement& delta, const FrameState& state) {
  FrameState out;
  out.pose_tangent = log(boxplus(delta.head<6>(), exp(state.pose_tangent)));
  out.affine.a = state.affine.a + delta(6);
  out.affine.b = state.affine.b + delta(7);
  out.affine.t = state.affine.t;
  return out;
}

Vector2 project(const CameraIntrinsics& camera, const Vector3& x, double z_min) {
  if (!(x.z() > z_min)) throw Error(ErrorCode::kBehindCamera, "point depth " + std::to_string(x.z()));
  return Vector2(camera.fu * x.x() / x.z() + camera.cu, camera.fv * x.y() / x.z() + camera.cv);
}

Vector3 backproject(const CameraIntrinsics& camera, const Vector2& p, double idepth) {
  if (!(idepth > 0.0)) throw Error(ErrorCode::kNonPositiveDepth, "inverse depth " + std::to_string(idepth));
  const double depth = 1.0 / idepth;
  return Vector3((p.x() - camera.cu) / camera.fu * depth, (p.y() - camera.cv) / camera.fv * depth, depth);
}

WarpOutcome try_warp(const CameraIntrinsics& camera, const Pose& target_from_host, const Vector2& p,
                     double idepth, double border, double z_min) {
  WarpOutcome out;
  if (!(idepth > 0.0)) {
    out.status = WarpStatus::kNonPositiveDepth;
    return out;
  }
  const Vector3 x_host((p.x() - camera.cu) / camera.fu / idepth, (p.y() - camera.cv) / camera.fv / idepth,
                       1.0 / idepth);
  out.camera_point = target_from_host * x_host;
  const double z = out.camera_point.z();
  if (!(z > z_min)) {
    out.status = WarpStatus::kBehindCamera;
    return out;
  }
  out.point.p = Vector2(camera.fu * out.camera_point.x() / z + camera.cu,
                        camera.fv * out.camera_point.y() / z + camera.cv);
  out.point.idepth = 1.0 / z;
  if (!camera.contains(out.point.p, border)) out.status = WarpStatus::kOutOfImage;
  return out;
}

WarpedPoint warp(const CameraIntrinsics& camera, const FrameState& state, const Vector2& p, double idepth,
                 double border) {
  const WarpOutcome out = try_warp(camera, state.pose(), p, idepth, border);
  switch (out.status) {
    case WarpStatus::kOk: return out.point;
    case WarpStatus::kNonPositiveDepth:
      throw Error(ErrorCode::kNonPositiveDepth, "inverse depth " + std::to_string(idepth));
    case WarpStatus::kBehindCamera: throw Error(ErrorCode::kBehindCamera, "warped point behind camera");
    case WarpStatus::kOutOfImage: throw Error(ErrorCode::kOutOfImage, "warped point outside image");
  }
  return out.point;
}

}  // namespace jointvo
