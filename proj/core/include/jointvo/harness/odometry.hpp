#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "jointvo/config.hpp"
#include "jointvo/features.hpp"
#include "jointvo/harness/dataset.hpp"
#include "jointvo/harness/trajectory_metrics.hpp"
#include "jointvo/mapper.hpp"

namespace jointvo {

enum class InitMode {
  /// First keyframe depths from the source's ground truth.
  kGroundTruth,
  /// Random inverse depths refined by forced keyframes over the bootstrap frames.
  kFilter,
};

struct OdometryOptions {
  Config config;
  InitMode init = InitMode::kGroundTruth;
  /// Serializes tracking and mapping on the calling thread; fully deterministic.
  bool single_thread = false;
  int bootstrap_frames = 10;
  std::uint64_t seed = 1;
  /// Runs the local map audit after every mapping step (single-thread only).
  bool audit = false;
};

enum TimingStage {
  kPreparation,
  kFeatureExtraction,
  kFeatureMatching,
  kJointOptimization,
  kOccupancyUpdate,
  kCandidateUpdate,
  kPointInitialization,
  kPhotometricBa,
  kLocalMapUpdate,
  kStructureOnly,
  kNumTimingStages,
};

/// Diagnostics CSV header names of the timing columns, in TimingStage order.
const std::array<const char*, kNumTimingStages>& timing_columns();

struct FrameDiagnostics {
  std::size_t frame = 0;
  double timestamp = 0.0;
  bool keyframe = false;
  int corners = 0;
  int n_p = 0;
  int n_g = 0;
  std::vector<double> K_trace;
  double energy = 0.0;
  double sigma2_p = 0.0;
  double sigma2_g = 0.0;
  /// Milliseconds; mapping stages are charged to the frame that triggered them.
  std::array<double, kNumTimingStages> timings{};
};

/// Taxonomy of map points by the residuals they feed.
enum class PointCategory { kHybridActive, kPhotometricOnly, kGeometricOnly, kMarginalized };

const char* to_string(PointCategory category);

struct MapPoint {
  FeatureId id = 0;
  FeatureKind kind = FeatureKind::kPixel;
  FeatureStatus status = FeatureStatus::kActive;
  PointCategory category = PointCategory::kPhotometricOnly;
  Vector3 world = Vector3::Zero();
  double idepth_variance = 0.0;
};

struct OdometryReport {
  /// One camera-to-world entry per tracked frame.
  std::vector<TrajectoryEntry> trajectory;
  /// Index of the first frame that could not be tracked, or the stream length when the stream
  /// is too short to track.
  std::optional<std::size_t> tracking_lost_at;
  std::string lost_reason;
  std::vector<FrameDiagnostics> diagnostics;
  /// Active and marginalized points, including those dropped with their keyframes.
  std::vector<MapPoint> map;
  std::optional<AlignmentMetrics> metrics;
  int keyframes = 0;
  std::vector<std::string> warnings;
};

/// Called after every processed frame with the current local map.
using FrameObserver = std::function<void(std::size_t frame, const LocalMap& map)>;

/// Tracking and mapping over the whole stream. Tracking loss ends the run and is reported,
/// not thrown.
OdometryReport run_odometry(const FrameSource& source, const OdometryOptions& options,
                            const FrameObserver& observer = {});

/// trajectory.txt, map.txt, diagnostics.csv and, with ground truth, metrics.txt.
void write_report(const OdometryReport& report, const std::filesystem::path& directory);

}  // namespace jointvo
