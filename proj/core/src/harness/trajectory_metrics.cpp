#include "jointvo/harness/trajectory_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <Eigen/Geometry>

#include "jointvo/error.hpp"

namespace jointvo {

namespace {

constexpr double kTimestampTolerance = 1e-6;

Eigen::Matrix3Xd columns(const std::vector<Vector3>& points, std::size_t begin, std::size_t end) {
  Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(end - begin));
  for (std::size_t i = begin; i < end; ++i) m.col(static_cast<Eigen::Index>(i - begin)) = points[i];
  return m;
}

}  // namespace

TrajectoryEntry make_entry(double timestamp, const Pose& world_to_camera) {
  const Pose camera_to_world = world_to_camera.inverse();
  return {timestamp, camera_to_world.translation(), camera_to_world.quaternion()};
}

std::vector<TrajectoryEntry> read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMalformedDataset, "cannot open trajectory " + path.string());
  std::vector<TrajectoryEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    TrajectoryEntry e;
    double qx = 0.0, qy = 0.0, qz = 0.0, qw = 1.0;
    if (!(fields >> e.timestamp >> e.position.x() >> e.position.y() >> e.position.z() >> qx >> qy >> qz >> qw)) {
      throw Error(ErrorCode::kMalformedDataset, path.string() + ":" + std::to_string(line_no) +
                                                    ": expected 'timestamp tx ty tz qx qy qz qw'");
    }
    e.orientation = Eigen::Quaterniond(qw, qx, qy, qz);
    if (e.orientation.norm() < 1e-9) {
      throw Error(ErrorCode::kMalformedDataset, path.string() + ":" + std::to_string(line_no) + ": zero quaternion");
    }
    e.orientation.normalize();
    out.push_back(e);
  }
  return out;
}

void write_trajectory(const std::filesystem::path& path, const std::vector<TrajectoryEntry>& trajectory) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kMalformedDataset, "cannot write trajectory " + path.string());
  char buf[256];
  for (const TrajectoryEntry& e : trajectory) {
    const Eigen::Quaterniond& q = e.orientation;
    std::snprintf(buf, sizeof(buf), "%.9f %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", e.timestamp, e.position.x(),
                  e.position.y(), e.position.z(), q.x(), q.y(), q.z(), q.w());
    out << buf;
  }
}

Sim3 align_sim3(const Eigen::Matrix3Xd& source, const Eigen::Matrix3Xd& target) {
  const Matrix4 t = Eigen::umeyama(source, target, true);
  Sim3 s;
  const Matrix3 sr = t.topLeftCorner<3, 3>();
  s.scale = std::cbrt(sr.determinant());
  s.rotation = sr / s.scale;
  s.translation = t.topRightCorner<3, 1>();
  return s;
}

AlignmentMetrics compute_alignment_error(const std::vector<TrajectoryEntry>& estimate,
                                         const std::vector<TrajectoryEntry>& ground_truth) {
  std::vector<TrajectoryEntry> gt_sorted = ground_truth;
  std::sort(gt_sorted.begin(), gt_sorted.end(),
            [](const TrajectoryEntry& a, const TrajectoryEntry& b) { return a.timestamp < b.timestamp; });
  std::vector<Vector3> est;
  std::vector<Vector3> gt;
  for (const TrajectoryEntry& e : estimate) {
    auto it = std::lower_bound(gt_sorted.begin(), gt_sorted.end(), e.timestamp - kTimestampTolerance,
                               [](const TrajectoryEntry& g, double t) { return g.timestamp < t; });
    if (it == gt_sorted.end() || std::abs(it->timestamp - e.timestamp) > kTimestampTolerance) continue;
    est.push_back(e.position);
    gt.push_back(it->position);
  }
  const std::size_t n = est.size();
  if (n < 3) {
    throw Error(ErrorCode::kInsufficientOverlap,
                "only " + std::to_string(n) + " estimated poses match ground-truth timestamps");
  }

  AlignmentMetrics m;
  m.matched = n;
  const Eigen::Matrix3Xd E = columns(est, 0, n);
  const Eigen::Matrix3Xd G = columns(gt, 0, n);

  const Sim3 full = align_sim3(E, G);
  m.scale = full.scale;
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += (full * est[i] - gt[i]).squaredNorm();
  m.ate_rmse = std::sqrt(sq / static_cast<double>(n));

  for (std::size_t i = 1; i < n; ++i) m.path_length += (gt[i] - gt[i - 1]).norm();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m.extent = std::max(m.extent, (gt[i] - gt[j]).norm());
  }

  const std::size_t segment = std::min(n, std::max<std::size_t>(3, n / 10));
  const Sim3 start = align_sim3(columns(est, 0, segment), columns(gt, 0, segment));
  const Sim3 end = align_sim3(columns(est, n - segment, n), columns(gt, n - segment, n));
  double gap = 0.0;
  for (std::size_t i = 0; i < n; ++i) gap += (start * est[i] - end * est[i]).squaredNorm();
  m.alignment_error = std::sqrt(gap / static_cast<double>(n));
  m.drift_per_meter = m.path_length > 0.0 ? (start * est[n - 1] - gt[n - 1]).norm() / m.path_length : 0.0;
  return m;
}

}  // namespace jointvo
