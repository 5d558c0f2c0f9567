#pragma once

#include <functional>
#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "jointvo/config.hpp"
#include "jointvo/features.hpp"
#include "jointvo/geometry.hpp"
#include "jointvo/image_pyramid.hpp"
#include "jointvo/joint_tracker.hpp"

namespace jointvo {

enum class KeyframeKind { kHybrid, kIndirect };

const char* to_string(KeyframeKind kind);

/// A descriptor match of a map corner recorded in a keyframe.
struct Observation {
  FeatureId feature = 0;
  Vector2 obs = Vector2::Zero();
};

struct Keyframe {
  KeyframeId id = kNoKeyframe;
  int frame_index = 0;
  double timestamp = 0.0;
  ImagePyramidPtr pyramid;
  /// World-to-camera.
  Pose pose;
  AffineBrightness affine;
  std::vector<Feature> features;
  std::vector<Observation> observations;

  KeyframeKind kind() const { return kind_; }
  /// Hybrid -> Indirect only. Throws kIllegalTransition otherwise.
  void demote();

 private:
  KeyframeKind kind_ = KeyframeKind::kHybrid;
};

/// Inverse-depth Gaussian of a candidate.
struct DepthHypothesis {
  double idepth = 1.0;
  double idepth_variance = 1.0;
  int num_observations = 0;

  /// Product-of-Gaussians fusion of one observation.
  void fuse(double observed_idepth, double observed_variance);
};

class LocalMap {
 public:
  std::vector<Keyframe> hybrid;
  std::vector<Keyframe> indirect;
  /// Occupancy over the newest keyframe.
  OccupancyGrid grid;

  bool empty() const { return hybrid.empty(); }
  Keyframe& newest() { return hybrid.back(); }
  const Keyframe& newest() const { return hybrid.back(); }

  Keyframe* find_keyframe(KeyframeId id);
  const Keyframe* find_keyframe(KeyframeId id) const;

  Feature* find_feature(FeatureId id);
  const Feature* find_feature(FeatureId id) const;

  FeatureId allocate_feature_id() { return next_feature_id_++; }
  KeyframeId allocate_keyframe_id() { return next_keyframe_id_++; }

  /// All keyframes, hybrid first.
  std::vector<const Keyframe*> keyframes() const;

 private:
  FeatureId next_feature_id_ = 1;
  KeyframeId next_keyframe_id_ = 0;
};

/// Throws std::logic_error naming the first violated map invariant.
void audit(const LocalMap& map, const MapperConfig& config);

/// Flow, brightness and visibility criteria against the reference keyframe.
bool keyframe_decision(const TrackResult& track, const AffineBrightness& frame_affine, const Keyframe& reference,
                       const MapperConfig& config);

struct DepthUpdateStats {
  int updated = 0;
  int outliers = 0;
  int skipped_baseline = 0;
};

/// Epipolar search and fusion for every candidate hosted in the hybrid window.
/// `frame_pose` is world-to-camera; `sigma2_p` is the tracker's photometric variance.
DepthUpdateStats update_candidate_depths(LocalMap& map, const ImagePyramid& frame, const Pose& frame_pose,
                                         const AffineBrightness& frame_affine, double sigma2_p, const Config& config);

/// Result of a single candidate's epipolar search.
struct EpipolarResult {
  enum class Status { kFused, kOutlier, kSkipped };
  Status status = Status::kSkipped;
  double idepth = 0.0;
  double idepth_variance = 0.0;
  double best_cost = 0.0;
};

EpipolarResult epipolar_search(const Feature& feature, const Keyframe& host, const ImagePyramid& frame,
                               const Pose& frame_pose, const AffineBrightness& frame_affine, double sigma2_p,
                               const Config& config);

/// Normal equations of windowed photometric BA with the depth block kept diagonal.
/// Camera blocks are ordered by window position, skipping the gauge keyframe.
struct BaNormalEquations {
  Eigen::MatrixXd H_cc;
  Eigen::VectorXd b_c;
  /// Camera-depth coupling, one column per free depth.
  Eigen::MatrixXd H_cd;
  Eigen::VectorXd H_dd;
  Eigen::VectorXd b_d;
  double energy = 0.0;
};

/// Solves (H + lambda diag(H)) x = -b by eliminating the depths. Returns (cameras, depths).
std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_schur(const BaNormalEquations& system, double lambda);

/// Same solution from the assembled dense system; the reference for solve_schur.
std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_dense(const BaNormalEquations& system, double lambda);

/// Handle for building and evaluating the BA problem on a map.
class PhotometricBundle {
 public:
  PhotometricBundle(LocalMap& map, const Config& config);

  int num_cameras() const { return static_cast<int>(cameras_.size()); }
  int num_depths() const { return static_cast<int>(depths_.size()); }
  FeatureId anchor() const { return anchor_; }
  /// Features behind the depth unknowns, in solver order.
  const std::vector<Feature*>& depth_features() const { return depths_; }

  BaNormalEquations linearize() const;
  double energy() const;

  /// Applies an increment; returns false (and leaves the map untouched) if any depth would
  /// become non-positive.
  bool apply(const Eigen::VectorXd& cameras, const Eigen::VectorXd& depths);

  /// Photometric residual variance over all current blocks (MAD).
  double residual_variance() const;

  /// Per feature: (blocks evaluated, blocks above the outlier threshold).
  std::unordered_map<FeatureId, std::pair<int, int>> outlier_votes(double threshold) const;

 private:
  struct Term {
    std::size_t host;
    std::size_t target;
    Feature* feature;
    int depth_index;
  };

  LocalMap& map_;
  const Config& config_;
  std::vector<int> cameras_;
  std::vector<Feature*> depths_;
  std::vector<Term> terms_;
  FeatureId anchor_ = 0;
};

struct BaResult {
  int iterations = 0;
  int accepted = 0;
  double initial_energy = 0.0;
  double final_energy = 0.0;
  std::vector<double> energy_trace;
  int outliers = 0;
};

/// Windowed LM photometric BA over hybrid keyframe states and active inverse depths.
/// Throws kSingularHessian when the window is degenerate.
BaResult photometric_ba(LocalMap& map, const Config& config);

/// Depth-only geometric refinement of marginalized corners observed in at least two live
/// keyframes. Returns the number of features updated.
int structure_only_optimization(LocalMap& map, const Config& config);

/// Refines one inverse depth from observations (keyframe pose, obs). Returns nullopt when
/// under-constrained or when the energy would not decrease.
std::optional<double> refine_idepth(const Vector2& p, double idepth, const Pose& host_pose,
                                    const std::vector<std::pair<Pose, Vector2>>& observations,
                                    const CameraIntrinsics& camera, double gamma_g, int iterations);

/// Chooses the keyframe to drop: never one of the two newest; under-populated hybrids first,
/// then the maximal redundancy score.
std::size_t select_marginalization(const LocalMap& map, const MapperConfig& config);

/// Removes one keyframe from the hybrid window when it exceeds the configured size.
/// Returns the id of the demoted keyframe.
std::optional<KeyframeId> marginalize(LocalMap& map, const MapperConfig& config);

/// Clears the grid and marks every active (and, optionally, candidate) point of the hybrid
/// window that projects into the newest keyframe.
void update_occupancy(OccupancyGrid& grid, const LocalMap& map, bool include_candidates = true);

/// Read snapshot for the tracker: active points of the hybrid window (photometric, plus
/// geometric for corners) and marginalized corners of every live keyframe (geometric only).
TrackingReference make_tracking_reference(const LocalMap& map);

/// Applies the tracker's verdicts: photometric outliers become Outlier, corner match failures
/// are counted and repeated failures become Outlier, inlier matches reset the count.
void apply_track_outcome(LocalMap& map, const TrackResult& track, const TrackingReference& reference,
                         const FeatureConfig& config);

struct KeyframeInput {
  int frame_index = 0;
  double timestamp = 0.0;
  ImagePyramidPtr pyramid;
  /// World-to-camera.
  Pose pose;
  AffineBrightness affine;
  std::vector<Feature> corners;
  std::vector<Observation> observations;
  double sigma2_p = 1.0;
};

/// Wall-clock milliseconds of the mapping stages.
struct MappingTimings {
  double occupancy = 0.0;
  double candidate_update = 0.0;
  double initialization = 0.0;
  double bundle_adjustment = 0.0;
  double local_map = 0.0;
  double structure = 0.0;
};

struct InsertionReport {
  KeyframeId id = kNoKeyframe;
  int activated = 0;
  int new_candidates = 0;
  int redundant_marginalized = 0;
  DepthUpdateStats depth_update;
  std::optional<BaResult> ba;
  int structure_updates = 0;
  std::optional<KeyframeId> demoted;
  MappingTimings timings;
};

/// Seeds a new candidate's inverse depth (e.g. from ground truth). Returning nullopt falls
/// back to the nearest active point.
using DepthSeed = std::function<std::optional<double>(const Vector2& p)>;

/// Full keyframe insertion: candidate update, occupancy and redundancy control, activation,
/// candidate sampling, photometric BA, structure-only optimization and marginalization.
/// Seeded candidates are activated immediately.
InsertionReport insert_keyframe(LocalMap& map, KeyframeInput input, const Config& config,
                                const DepthSeed& seed = {});

}  // namespace jointvo
