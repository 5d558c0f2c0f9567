#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include <Eigen/Geometry>

#include "jointvo/geometry.hpp"

namespace jointvo {

/// Camera-to-world pose with a timestamp; one line `timestamp tx ty tz qx qy qz qw` on disk.
struct TrajectoryEntry {
  double timestamp = 0.0;
  Vector3 position = Vector3::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();
};

/// Entry for a world-to-camera pose.
TrajectoryEntry make_entry(double timestamp, const Pose& world_to_camera);

std::vector<TrajectoryEntry> read_trajectory(const std::filesystem::path& path);
void write_trajectory(const std::filesystem::path& path, const std::vector<TrajectoryEntry>& trajectory);

/// Similarity transform x -> scale R x + t.
struct Sim3 {
  double scale = 1.0;
  Matrix3 rotation = Matrix3::Identity();
  Vector3 translation = Vector3::Zero();

  Vector3 operator*(const Vector3& x) const { return scale * (rotation * x) + translation; }
};

/// Least-squares similarity mapping `source` onto `target` (columns are points).
Sim3 align_sim3(const Eigen::Matrix3Xd& source, const Eigen::Matrix3Xd& target);

struct AlignmentMetrics {
  std::size_t matched = 0;
  /// RMSE of positions after aligning the whole estimate to ground truth.
  double ate_rmse = 0.0;
  /// RMS gap between start-aligned and end-aligned estimates over the whole sequence.
  double alignment_error = 0.0;
  /// End-point error after start-segment alignment, divided by the ground-truth path length.
  double drift_per_meter = 0.0;
  double path_length = 0.0;
  /// Largest distance between two ground-truth positions.
  double extent = 0.0;
  double scale = 1.0;
};

/// Matches entries by timestamp (within 1e-6 s) and evaluates the aligned errors. Start and
/// end segments each hold max(3, n/10) poses. Throws kInsufficientOverlap below 3 matches.
AlignmentMetrics compute_alignment_error(const std::vector<TrajectoryEntry>& estimate,
                                         const std::vector<TrajectoryEntry>& ground_truth);

}  // namespace jointvo
