#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "jointvo/config.hpp"
#include "jointvo/features.hpp"
#include "jointvo/geometry.hpp"
#include "jointvo/image_pyramid.hpp"
#include "jointvo/residuals.hpp"

namespace jointvo {

/// K = scale e^{-decay l} / (1 + e^{(midpoint - N_g)/slope}).
double utility_K(double level, double num_geometric, const UtilityConfig& config = {});

/// One LM step of the scalarized joint energy. Photometric and geometric sums are each
/// normalized by their valid-block count and variance; lambda scales the diagonal.
/// Throws kEmptySystem without valid blocks and kSingularHessian when the damped system
/// cannot be factorized.
StateIncrement joint_step(const ResidualSystem& system, double K, double lambda);

/// One map point as seen by the tracker: a snapshot of the feature and its host.
struct TrackPoint {
  Feature feature;
  /// Host keyframe to the reference keyframe.
  Pose ref_from_host;
  AffineBrightness host_affine;
  ImagePyramidPtr host_pyramid;
  /// Contributes a photometric residual (active, with a patch).
  bool photometric = true;
  /// Eligible for descriptor matching and a geometric residual.
  bool geometric = false;
};

/// Read snapshot of the local map taken by the tracker for one frame.
struct TrackingReference {
  KeyframeId keyframe = kNoKeyframe;
  /// World-to-camera pose of the reference keyframe.
  Pose pose;
  AffineBrightness affine;
  std::vector<TrackPoint> points;
};

struct TrackingFrame {
  ImagePyramidPtr pyramid;
  std::vector<Feature> corners;
};

struct LevelStats {
  int level = 0;
  int n_p = 0;
  int n_g = 0;
  double K = 0.0;
  double sigma2_p = 0.0;
  double sigma2_g = 0.0;
  int iterations = 0;
};

struct TrackResult {
  /// Pose relative to the reference keyframe plus absolute affine parameters.
  FrameState state;
  std::vector<LevelStats> levels;
  double final_energy = 0.0;
  std::vector<double> K_trace;
  /// Joint energy after every accepted LM iteration, per level.
  std::vector<std::vector<double>> energy_trace;
  bool converged = false;

  std::vector<Match> matches;
  /// Map indices of geometric matches still inliers at the finest level.
  std::vector<std::size_t> inlier_matches;
  std::vector<FeatureId> unmatched_corners;
  std::vector<FeatureId> photometric_outliers;
  std::vector<FeatureId> geometric_outliers;
  int n_p = 0;
  int n_g = 0;
  int attempted_photometric = 0;
  double sigma2_p = 1.0;
  double sigma2_g = 1.0;
  /// Root mean squared optical flow of valid photometric points relative to the reference.
  double rms_flow = 0.0;
  /// Wall-clock milliseconds spent in descriptor matching and in the LM loop.
  double matching_ms = 0.0;
  double optimization_ms = 0.0;
};

/// Coarse-to-fine joint LM tracking of `frame` against the reference snapshot.
/// Throws kTrackingLost when the finest level retains too few photometric blocks and matches.
TrackResult track_frame(const TrackingReference& reference, const TrackingFrame& frame, const FrameState& prior,
                        const Config& config);

struct PoseRecord {
  /// World-to-camera.
  Pose pose;
  AffineBrightness affine;
};

/// Constant-velocity prediction relative to the reference keyframe. Fewer than two history
/// entries give the identity pose with the last affine parameters.
FrameState constant_velocity_prior(std::span<const PoseRecord> history, const Pose& reference_pose);

}  // namespace jointvo
