#pragma once

#include <array>
#include <utility>
#include <vector>

#include "jointvo/config.hpp"
#include "jointvo/features.hpp"
#include "jointvo/geometry.hpp"
#include "jointvo/image_pyramid.hpp"

namespace jointvo {

using PatternVector = Eigen::Matrix<double, kPatternSize, 1>;
using PatternJacobian = Eigen::Matrix<double, kPatternSize, 8>;
using Matrix2x6 = Eigen::Matrix<double, 2, 6>;
using Matrix2x8 = Eigen::Matrix<double, 2, 8>;

/// Host-side data of one photometric residual at a given pyramid level.
struct PhotometricHost {
  /// Feature location in level pixels.
  Vector2 p = Vector2::Zero();
  double idepth = 1.0;
  /// Host intensities at p + pattern offset (level pixels), pattern order.
  PatternVector intensities = PatternVector::Zero();
  AffineBrightness affine;
  /// Host camera to the frame in which the state pose is expressed.
  Pose base_from_host;
};

/// Host data at level 0 taken from the stored patch.
PhotometricHost host_from_patch(const Feature& feature, const AffineBrightness& host_affine,
                                const Pose& base_from_host);

/// Host data at pyramid level l sampled from the host pyramid. Returns false when the pattern
/// leaves the host image at that level.
bool host_at_level(const Feature& feature, const ImagePyramid& host_pyramid, int level,
                   const AffineBrightness& host_affine, const Pose& base_from_host, PhotometricHost& out);

struct PhotometricBlock {
  PatternVector r = PatternVector::Zero();
  PatternJacobian J = PatternJacobian::Zero();
  /// Sum of squared pattern residuals.
  double energy = 0.0;
  double w = 1.0;
  bool valid = false;
  std::size_t source = 0;
};

struct GeometricBlock {
  Vector2 r = Vector2::Zero();
  Matrix2x8 J = Matrix2x8::Zero();
  double w_d = 1.0;
  double w = 1.0;
  bool valid = false;
  std::size_t source = 0;

  double energy() const { return r.squaredNorm(); }
};

struct ResidualSystem {
  std::vector<PhotometricBlock> photometric;
  std::vector<GeometricBlock> geometric;
  int n_p = 0;
  int n_g = 0;
  double sigma2_p = 1.0;
  double sigma2_g = 1.0;

  /// Recounts n_p and n_g from the valid flags.
  void recount();
};

/// 1 if e < gamma^2, gamma / sqrt(e) otherwise.
double huber_weight(double e, double gamma);

/// Huber norm of a squared error; its derivative with respect to e is huber_weight.
double huber_norm(double e, double gamma);

/// (1/sigma_d2) / max_inv_var.
double depth_variance_weight(double sigma_d2, double max_inv_var);

/// Huber weight of a whole photometric block, judged on the mean squared pattern residual.
double photometric_block_weight(double energy, double gamma_p);

/// Robust energy of a photometric block; consistent with photometric_block_weight.
double photometric_block_cost(double energy, double gamma_p);

/// d p' / d xi for a left perturbation of the target pose, given the point in target camera
/// coordinates. Columns ordered (translation, rotation).
Matrix2x6 projection_jacobian(const CameraIntrinsics& camera, const Vector3& x);

/// d p' / d idepth, for host pixel p with bearing K^-1 p and target_from_host.
Vector2 idepth_jacobian(const CameraIntrinsics& camera, const Pose& target_from_host, const Vector2& p,
                        double idepth);

/// Photometric residual of the pattern around host.p against `cur`. Warps with
/// exp(state) * base_from_host; the block is invalid when any pattern point fails to warp.
PhotometricBlock photometric_residual(const PhotometricHost& host, const ImagePlane& cur, const FrameState& state,
                                      const CameraIntrinsics& camera, double gamma_p);

/// Reprojection residual warp(p) - obs in level pixels; p and obs are given in level pixels.
GeometricBlock geometric_residual(const Vector2& p, double idepth, const Pose& base_from_host, const Vector2& obs,
                                  const FrameState& state, const CameraIntrinsics& camera, double w_d,
                                  double gamma_g);

/// MAD-based variances of the valid residual rows of each type, floored. Throws kEmptySystem
/// when neither type has a valid block. A type without valid blocks gets the floor.
std::pair<double, double> estimate_variances(const ResidualSystem& system, double floor);

/// Robust scale (1.4826 MAD)^2 of a sample, floored. The sample is reordered.
double mad_variance(std::vector<double>& values, double floor);

}  // namespace jointvo
