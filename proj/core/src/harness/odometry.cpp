#include "jointvo/harness/odometry.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <thread>
#include <unordered_map>

#include "jointvo/error.hpp"
#include "jointvo/joint_tracker.hpp"

namespace jointvo {

const std::array<const char*, kNumTimingStages>& timing_columns() {
  static const std::array<const char*, kNumTimingStages> names = {
      "Direct data preparation and Image Pyramids",
      "Features and Descriptors Extraction",
      "Feature Matching",
      "Joint Optimization",
      "Occupancy map Update",
      "Candidate Points Depth Update",
      "New map point initialization",
      "Photometric BA",
      "Local Map Update",
      "Structure only optimization",
  };
  return names;
}

const char* to_string(PointCategory category) {
  switch (category) {
    case PointCategory::kHybridActive:
      return "hybrid-active";
    case PointCategory::kPhotometricOnly:
      return "photometric-only";
    case PointCategory::kGeometricOnly:
      return "geometric-only";
    case PointCategory::kMarginalized:
      return "marginalized";
  }
  return "unknown";
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t) { return std::chrono::duration<double, std::milli>(Clock::now() - t).count(); }

/// Where a frame's pose comes from: its reference keyframe and the pose relative to it.
struct FrameRecord {
  double timestamp = 0.0;
  KeyframeId reference = kNoKeyframe;
  Pose from_reference;
};

struct MapperJob {
  std::size_t frame = 0;
  ImagePyramidPtr pyramid;
  std::vector<Feature> corners;
  bool tracked = false;
  TrackResult track;
  std::shared_ptr<const TrackingReference> reference;
  double timestamp = 0.0;
  Pose pose;
  AffineBrightness affine;
  bool keyframe = false;
  bool seed_depths = false;
};

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(T item) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

MapPoint make_point(const Keyframe& kf, const Feature& f) {
  MapPoint p;
  p.id = f.id;
  p.kind = f.kind;
  p.status = f.status();
  const bool active = f.status() == FeatureStatus::kActive;
  if (f.is_corner()) {
    p.category = active ? PointCategory::kHybridActive : PointCategory::kGeometricOnly;
  } else {
    p.category = active ? PointCategory::kPhotometricOnly : PointCategory::kMarginalized;
  }
  p.world = kf.pose.inverse() * backproject(kf.pyramid->intrinsics(0), f.p, f.idepth);
  p.idepth_variance = f.idepth_variance;
  return p;
}

class Engine {
 public:
  Engine(const FrameSource& source, const OdometryOptions& options) : source_(source), options_(options) {
    const std::size_t n = source.size();
    records_.reserve(n);
    diagnostics_.reserve(n);
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> uniform(0.5, 2.0);
    if (options.init == InitMode::kGroundTruth) {
      seed_ = [this](const Vector2& p) { return source_.true_idepth(0, p); };
    } else {
      seed_ = [rng, uniform](const Vector2&) mutable -> std::optional<double> { return uniform(rng); };
    }
  }

  OdometryReport run(const FrameObserver& observer);

 private:
  void track_loop(const std::function<std::shared_ptr<const LocalMap>()>& snapshot,
                  const std::function<void(MapperJob)>& submit, const std::function<bool()>& mapper_failed,
                  const std::function<void(std::size_t)>& after_frame);
  void process(LocalMap& map, MapperJob& job);
  void refresh(const LocalMap& map);

  const FrameSource& source_;
  const OdometryOptions& options_;
  DepthSeed seed_;

  std::mutex records_mutex_;
  std::vector<FrameRecord> records_;
  std::vector<FrameDiagnostics> diagnostics_;

  // Mapper-owned.
  std::unordered_map<KeyframeId, Pose> keyframe_poses_;
  std::map<FeatureId, MapPoint> archive_;
  int keyframes_ = 0;

  std::atomic<bool> keyframe_pending_{false};
  std::vector<PoseRecord> history_;
  OdometryReport report_;
};

void Engine::refresh(const LocalMap& map) {
  for (const Keyframe* kf : map.keyframes()) {
    keyframe_poses_[kf->id] = kf->pose;
    for (const Feature& f : kf->features) {
      const FeatureStatus s = f.status();
      if (s == FeatureStatus::kActive || s == FeatureStatus::kMarginalized) {
        archive_[f.id] = make_point(*kf, f);
      } else if (s == FeatureStatus::kOutlier) {
        archive_.erase(f.id);
      }
    }
  }
}

void Engine::process(LocalMap& map, MapperJob& job) {
  const Config& config = options_.config;
  std::array<double, kNumTimingStages> timings{};
  if (job.tracked) apply_track_outcome(map, job.track, *job.reference, config.features);

  if (job.keyframe) {
    KeyframeInput input;
    input.frame_index = static_cast<int>(job.frame);
    input.timestamp = job.timestamp;
    input.pyramid = job.pyramid;
    input.pose = job.pose;
    input.affine = job.affine;
    input.corners = std::move(job.corners);
    if (job.tracked) {
      input.sigma2_p = job.track.sigma2_p;
      std::unordered_map<std::size_t, Vector2> obs;
      for (const Match& m : job.track.matches) obs[m.map_index] = m.obs;
      for (std::size_t point : job.track.inlier_matches) {
        input.observations.push_back({job.reference->points[point].feature.id, obs.at(point)});
      }
    }
    const InsertionReport r = insert_keyframe(map, std::move(input), config, job.seed_depths ? seed_ : DepthSeed{});
    timings[kOccupancyUpdate] = r.timings.occupancy;
    timings[kCandidateUpdate] = r.timings.candidate_update;
    timings[kPointInitialization] = r.timings.initialization;
    timings[kPhotometricBa] = r.timings.bundle_adjustment;
    timings[kLocalMapUpdate] = r.timings.local_map;
    timings[kStructureOnly] = r.timings.structure;
    ++keyframes_;
    std::lock_guard lock(records_mutex_);
    records_[job.frame].reference = r.id;
    records_[job.frame].from_reference = Pose();
  } else {
    const auto start = Clock::now();
    update_candidate_depths(map, *job.pyramid, job.pose, job.affine, job.tracked ? job.track.sigma2_p : 1.0, config);
    timings[kCandidateUpdate] = ms_since(start);
  }
  if (options_.audit) audit(map, config.mapper);
  refresh(map);

  std::lock_guard lock(records_mutex_);
  FrameDiagnostics& d = diagnostics_[job.frame];
  d.keyframe = job.keyframe;
  for (int s = kOccupancyUpdate; s < kNumTimingStages; ++s) d.timings[s] = timings[s];
}

void Engine::track_loop(const std::function<std::shared_ptr<const LocalMap>()>& snapshot,
                        const std::function<void(MapperJob)>& submit, const std::function<bool()>& mapper_failed,
                        const std::function<void(std::size_t)>& after_frame) {
  const Config& config = options_.config;
  const CameraIntrinsics camera = source_.intrinsics();
  const int levels = std::min(config.tracker.num_levels, max_pyramid_levels(camera.width, camera.height));
  const std::size_t n = source_.size();

  for (std::size_t i = 0; i < n; ++i) {
    if (mapper_failed()) return;
    FrameDiagnostics diag;
    diag.frame = i;

    SourceFrame sf = source_.frame(i);
    diag.timestamp = sf.timestamp;
    auto start = Clock::now();
    auto pyramid = std::make_shared<const ImagePyramid>(build_pyramid(sf.image, camera, sf.exposure, levels));
    diag.timings[kPreparation] = ms_since(start);

    start = Clock::now();
    std::vector<Feature> corners;
    if (config.tracker.use_indirect) corners = detect_corners(*pyramid, config.features);
    diag.corners = static_cast<int>(corners.size());
    diag.timings[kFeatureExtraction] = ms_since(start);

    MapperJob job;
    job.frame = i;
    job.timestamp = sf.timestamp;
    job.pyramid = pyramid;
    job.corners = std::move(corners);

    if (i == 0) {
      job.keyframe = true;
      job.seed_depths = true;
      job.affine.t = sf.exposure;
      diag.keyframe = true;
      {
        std::lock_guard lock(records_mutex_);
        records_.push_back({sf.timestamp, kNoKeyframe, Pose()});
        diagnostics_.push_back(diag);
      }
      history_.push_back({Pose(), job.affine});
      keyframe_pending_ = true;
      submit(std::move(job));
      after_frame(i);
      continue;
    }

    const std::shared_ptr<const LocalMap> map = snapshot();
    auto reference = std::make_shared<const TrackingReference>(make_tracking_reference(*map));
    const FrameState prior = constant_velocity_prior(history_, reference->pose);
    TrackResult track;
    try {
      track = track_frame(*reference, TrackingFrame{pyramid, job.corners}, prior, config);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTrackingLost) throw;
      report_.tracking_lost_at = i;
      report_.lost_reason = e.what();
      return;
    }
    diag.timings[kFeatureMatching] = track.matching_ms;
    diag.timings[kJointOptimization] = track.optimization_ms;
    diag.n_p = track.n_p;
    diag.n_g = track.n_g;
    diag.K_trace = track.K_trace;
    diag.energy = track.final_energy;
    diag.sigma2_p = track.sigma2_p;
    diag.sigma2_g = track.sigma2_g;

    const bool bootstrapping = options_.init == InitMode::kFilter && static_cast<int>(i) <= options_.bootstrap_frames;
    job.keyframe = bootstrapping ||
                   (!keyframe_pending_ && keyframe_decision(track, track.state.affine, map->newest(), config.mapper));
    job.pose = track.state.pose() * reference->pose;
    job.affine = track.state.affine;
    job.reference = reference;
    diag.keyframe = job.keyframe;
    {
      std::lock_guard lock(records_mutex_);
      records_.push_back({sf.timestamp, reference->keyframe, track.state.pose()});
      diagnostics_.push_back(diag);
    }
    history_.push_back({job.pose, job.affine});
    job.tracked = true;
    job.track = std::move(track);
    if (job.keyframe) keyframe_pending_ = true;
    submit(std::move(job));
    after_frame(i);
  }
  if (n < 2) report_.tracking_lost_at = n;
}

OdometryReport Engine::run(const FrameObserver& observer) {
  if (options_.init == InitMode::kGroundTruth && source_.size() > 0) {
    const CameraIntrinsics k = source_.intrinsics();
    if (!source_.true_idepth(0, Vector2(k.cu, k.cv))) {
      throw Error(ErrorCode::kMalformedDataset, "ground-truth initialization needs the first frame's depth");
    }
  }

  if (options_.single_thread) {
    auto map = std::make_shared<LocalMap>();
    track_loop([&] { return std::shared_ptr<const LocalMap>(map); },
               [&](MapperJob job) {
                 process(*map, job);
                 keyframe_pending_ = false;
                 // Tracking continues from the bundle-adjusted keyframe pose.
                 if (job.keyframe && !map->empty()) history_.back().pose = map->newest().pose;
               },
               [] { return false; },
               [&](std::size_t i) {
                 if (observer) observer(i, *map);
               });
  } else {
    std::shared_mutex published_mutex;
    std::shared_ptr<const LocalMap> published = std::make_shared<const LocalMap>();
    BoundedQueue<MapperJob> queue(2);
    std::atomic<bool> failed{false};
    std::exception_ptr error;

    std::thread mapper([&] {
      try {
        while (auto job = queue.pop()) {
          std::shared_ptr<const LocalMap> current;
          {
            std::shared_lock lock(published_mutex);
            current = published;
          }
          // Copy, update outside the lock, then swap the new map in.
          auto work = std::make_shared<LocalMap>(*current);
          process(*work, *job);
          {
            std::unique_lock lock(published_mutex);
            published = std::move(work);
          }
          if (job->keyframe) keyframe_pending_ = false;
        }
      } catch (...) {
        error = std::current_exception();
        failed = true;
        queue.close();
      }
    });

    const auto snapshot = [&] {
      // The tracker needs at least the first keyframe.
      for (;;) {
        {
          std::shared_lock lock(published_mutex);
          if (!published->empty() || failed) return published;
        }
        std::this_thread::yield();
      }
    };
    try {
      track_loop(snapshot, [&](MapperJob job) { queue.push(std::move(job)); }, [&] { return failed.load(); },
                 [&](std::size_t i) {
                   if (!observer) return;
                   std::shared_ptr<const LocalMap> current;
                   {
                     std::shared_lock lock(published_mutex);
                     current = published;
                   }
                   observer(i, *current);
                 });
    } catch (...) {
      queue.close();
      mapper.join();
      throw;
    }
    queue.close();
    mapper.join();
    if (error) std::rethrow_exception(error);
  }

  report_.keyframes = keyframes_;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const FrameRecord& r = records_[i];
    const auto it = keyframe_poses_.find(r.reference);
    if (it == keyframe_poses_.end()) continue;
    report_.trajectory.push_back(make_entry(r.timestamp, r.from_reference * it->second));
  }
  report_.diagnostics = diagnostics_;
  for (const auto& [id, point] : archive_) report_.map.push_back(point);

  const std::vector<TrajectoryEntry> gt = source_.ground_truth();
  if (!gt.empty() && report_.trajectory.size() >= 3) {
    try {
      report_.metrics = compute_alignment_error(report_.trajectory, gt);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kInsufficientOverlap) throw;
      report_.warnings.push_back(e.what());
    }
  }
  return report_;
}

}  // namespace

OdometryReport run_odometry(const FrameSource& source, const OdometryOptions& options, const FrameObserver& observer) {
  validate(options.config);
  Engine engine(source, options);
  return engine.run(observer);
}

void write_report(const OdometryReport& report, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  write_trajectory(directory / "trajectory.txt", report.trajectory);

  {
    std::ofstream out(directory / "map.txt");
    out << "# id kind status category x y z idepth_variance\n";
    char buf[256];
    for (const MapPoint& p : report.map) {
      std::snprintf(buf, sizeof(buf), "%llu %s %s %s %.9g %.9g %.9g %.6g\n", static_cast<unsigned long long>(p.id),
                    to_string(p.kind), to_string(p.status), to_string(p.category), p.world.x(), p.world.y(),
                    p.world.z(), p.idepth_variance);
      out << buf;
    }
  }

  {
    std::ofstream out(directory / "diagnostics.csv");
    out << "frame,timestamp,keyframe,corners,n_p,n_g,K_trace,energy,sigma2_p,sigma2_g";
    for (const char* name : timing_columns()) out << "," << name;
    out << "\n";
    for (const FrameDiagnostics& d : report.diagnostics) {
      out << d.frame << "," << d.timestamp << "," << (d.keyframe ? 1 : 0) << "," << d.corners << "," << d.n_p << ","
          << d.n_g << ",";
      for (std::size_t k = 0; k < d.K_trace.size(); ++k) out << (k ? ";" : "") << d.K_trace[k];
      out << "," << d.energy << "," << d.sigma2_p << "," << d.sigma2_g;
      for (const double t : d.timings) out << "," << t;
      out << "\n";
    }
  }

  std::ofstream out(directory / "metrics.txt");
  out << "frames_tracked " << report.trajectory.size() << "\n";
  out << "keyframes " << report.keyframes << "\n";
  if (report.tracking_lost_at) out << "tracking_lost_at " << *report.tracking_lost_at << "\n";
  if (report.metrics) {
    const AlignmentMetrics& m = *report.metrics;
    out << "matched " << m.matched << "\n";
    out << "ate_rmse " << m.ate_rmse << "\n";
    out << "alignment_error " << m.alignment_error << "\n";
    out << "drift_per_meter " << m.drift_per_meter << "\n";
    out << "path_length " << m.path_length << "\n";
    out << "extent " << m.extent << "\n";
    out << "scale " << m.scale << "\n";
  }
}

}  // namespace jointvo
