#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace jointvo {

using Vector2 = Eigen::Vector2d;
using Vector3 = Eigen::Vector3d;
using Vector6 = Eigen::Matrix<double, 6, 1>;
using Vector8 = Eigen::Matrix<double, 8, 1>;
using Matrix3 = Eigen::Matrix3d;
using Matrix4 = Eigen::Matrix4d;
using Matrix6 = Eigen::Matrix<double, 6, 6>;
using Matrix8 = Eigen::Matrix<double, 8, 8>;

/// se(3) element ordered (translation, rotation).
using Tangent = Vector6;

/// 8-DoF increment: pose tangent, then delta a, delta b.
using StateIncrement = Vector8;

inline constexpr double kDefaultMinDepth = 1e-4;
inline constexpr double kDefaultImageBorder = 3.0;

/// Pinhole intrinsics in pixels. Level-l intrinsics follow the pixel-center convention.
struct CameraIntrinsics {
  double fu = 0.0;
  double fv = 0.0;
  double cu = 0.0;
  double cv = 0.0;
  int width = 0;
  int height = 0;

  /// Throws kInvalidConfig when the invariants do not hold.
  void validate() const;

  /// fu/2^l, fv/2^l, (cu + 0.5)/2^l - 0.5, floor(width/2^l).
  CameraIntrinsics at_level(int level) const;

  bool contains(const Vector2& p, double border) const {
    return p.x() >= border && p.y() >= border && p.x() <= width - 1 - border &&
           p.y() <= height - 1 - border;
  }
};

/// Level-0 pixel to level-l pixel under the same convention as at_level().
Vector2 to_level(const Vector2& p0, int level);
Vector2 from_level(const Vector2& pl, int level);

/// Rigid transform x' = R x + t.
class Pose {
 public:
  Pose() : rotation_(Matrix3::Identity()), translation_(Vector3::Zero()) {}
  Pose(const Matrix3& rotation, const Vector3& translation)
      : rotation_(rotation), translation_(translation) {}

  static Pose identity() { return Pose(); }
  static Pose from_quaternion(const Eigen::Quaterniond& q, const Vector3& t);

  const Matrix3& rotation() const { return rotation_; }
  const Vector3& translation() const { return translation_; }

  Pose operator*(const Pose& other) const {
    return Pose(rotation_ * other.rotation_, rotation_ * other.translation_ + translation_);
  }
  Vector3 operator*(const Vector3& x) const { return rotation_ * x + translation_; }

  Pose inverse() const {
    const Matrix3 rt = rotation_.transpose();
    return Pose(rt, -(rt * translation_));
  }

  Matrix4 matrix() const;
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(rotation_).normalized(); }

  /// Adjoint in (translation, rotation) ordering: exp(Ad v) = T exp(v) T^-1.
  Matrix6 adjoint() const;

  /// Rotation angle in radians, in [0, pi].
  double angle() const;

  /// Camera center for a world-to-camera pose.
  Vector3 center() const { return -(rotation_.transpose() * translation_); }

 private:
  Matrix3 rotation_;
  Vector3 translation_;
};

Matrix3 hat(const Vector3& w);
Matrix3 so3_exp(const Vector3& w);

Pose exp(const Tangent& v);

/// Throws kAngleNearPi when the rotation angle is within 1e-6 of pi.
Tangent log(const Pose& pose);

/// v [+] T = exp(v) T
Pose boxplus(const Tangent& v, const Pose& pose);

/// Affine brightness transfer L(a,b): I -> e^-a (I - b), plus the exposure time.
struct AffineBrightness {
  double a = 0.0;
  double b = 0.0;
  double t = 1.0;

  double apply(double intensity) const;
};

/// (t_target e^a_target) / (t_host e^a_host).
double brightness_ratio(const AffineBrightness& target, const AffineBrightness& host);

struct FrameState {
  Tangent pose_tangent = Tangent::Zero();
  AffineBrightness affine;

  Pose pose() const { return exp(pose_tangent); }
};

/// delta (+) state: pose composed on the left, affine parameters added.
FrameState oplus(const StateIncrement& delta, const FrameState& state);

/// Throws kBehindCamera when x.z <= z_min.
Vector2 project(const CameraIntrinsics& camera, const Vector3& x, double z_min = kDefaultMinDepth);

/// Throws kNonPositiveDepth when idepth <= 0. The returned point has depth 1/idepth.
Vector3 backproject(const CameraIntrinsics& camera, const Vector2& p, double idepth);

struct WarpedPoint {
  Vector2 p;
  double idepth = 0.0;
};

enum class WarpStatus { kOk, kBehindCamera, kOutOfImage, kNonPositiveDepth };

struct WarpOutcome {
  WarpStatus status = WarpStatus::kOk;
  WarpedPoint point;
  /// Point in target camera coordinates (valid unless status is kNonPositiveDepth).
  Vector3 camera_point = Vector3::Zero();

  bool ok() const { return status == WarpStatus::kOk; }
};

/// Non-throwing warp of host pixel p with inverse depth idepth into the target camera.
WarpOutcome try_warp(const CameraIntrinsics& camera, const Pose& target_from_host, const Vector2& p,
                     double idepth, double border = kDefaultImageBorder,
                     double z_min = kDefaultMinDepth);

/// Warps from reference-keyframe coordinates into the frame described by state.
/// Throws kNonPositiveDepth, kBehindCamera or kOutOfImage.
WarpedPoint warp(const CameraIntrinsics& camera, const FrameState& state, const Vector2& p,
                 double idepth, double border = kDefaultImageBorder);

}  // namespace jointvo
