#include "jointvo/mapper.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_set>

#include "jointvo/error.hpp"
#include "jointvo/residuals.hpp"

namespace jointvo {

const char* to_string(KeyframeKind kind) { return kind == KeyframeKind::kHybrid ? "hybrid" : "indirect"; }

void Keyframe::demote() {
  if (kind_ != KeyframeKind::kHybrid) {
    throw Error(ErrorCode::kIllegalTransition, "keyframe " + std::to_string(id) + " is already indirect");
  }
  kind_ = KeyframeKind::kIndirect;
}

void DepthHypothesis::fuse(double observed_idepth, double observed_variance) {
  const double sum = idepth_variance + observed_variance;
  idepth = (idepth * observed_variance + observed_idepth * idepth_variance) / sum;
  idepth_variance = idepth_variance * observed_variance / sum;
  ++num_observations;
}

Keyframe* LocalMap::find_keyframe(KeyframeId id) {
  return const_cast<Keyframe*>(static_cast<const LocalMap*>(this)->find_keyframe(id));
}

const Keyframe* LocalMap::find_keyframe(KeyframeId id) const {
  for (const Keyframe& kf : hybrid) {
    if (kf.id == id) return &kf;
  }
  for (const Keyframe& kf : indirect) {
    if (kf.id == id) return &kf;
  }
  return nullptr;
}

Feature* LocalMap::find_feature(FeatureId id) {
  return const_cast<Feature*>(static_cast<const LocalMap*>(this)->find_feature(id));
}

const Feature* LocalMap::find_feature(FeatureId id) const {
  for (const Keyframe* kf : keyframes()) {
    for (const Feature& f : kf->features) {
      if (f.id == id) return &f;
    }
  }
  return nullptr;
}

std::vector<const Keyframe*> LocalMap::keyframes() const {
  std::vector<const Keyframe*> out;
  out.reserve(hybrid.size() + indirect.size());
  for (const Keyframe& kf : hybrid) out.push_back(&kf);
  for (const Keyframe& kf : indirect) out.push_back(&kf);
  return out;
}

namespace {

bool is_live_indirect(const Feature& f) {
  return f.is_corner() &&
         (f.status() == FeatureStatus::kActive || f.status() == FeatureStatus::kMarginalized);
}

// Corner features linking `kf` with `newest`: hosted in or observed by kf, and observed by or
// hosted in newest.
bool shares_indirect(const LocalMap& map, const Keyframe& kf, const Keyframe& newest) {
  std::unordered_set<FeatureId> in_newest;
  for (const Observation& o : newest.observations) in_newest.insert(o.feature);
  for (const Feature& f : newest.features) {
    if (is_live_indirect(f)) in_newest.insert(f.id);
  }
  for (const Feature& f : kf.features) {
    if (is_live_indirect(f) && in_newest.count(f.id)) return true;
  }
  for (const Observation& o : kf.observations) {
    if (!in_newest.count(o.feature)) continue;
    const Feature* f = map.find_feature(o.feature);
    if (f && is_live_indirect(*f)) return true;
  }
  return false;
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

Pose relative(const Pose& target, const Pose& host) { return target * host.inverse(); }

}  // namespace

void audit(const LocalMap& map, const MapperConfig& config) {
  const auto fail = [](const std::string& what) { throw std::logic_error("local map audit: " + what); };
  if (static_cast<int>(map.hybrid.size()) > config.window_size) fail("hybrid window exceeds its size");
  std::unordered_set<FeatureId> ids;
  std::unordered_set<KeyframeId> kf_ids;
  for (const Keyframe* kf : map.keyframes()) {
    if (!kf_ids.insert(kf->id).second) fail("duplicate keyframe id " + std::to_string(kf->id));
    for (const Feature& f : kf->features) {
      if (!ids.insert(f.id).second) fail("duplicate feature id " + std::to_string(f.id));
      if (f.host_keyframe != kf->id) fail("feature " + std::to_string(f.id) + " lists a different host");
      if (f.kind == FeatureKind::kPixel && (f.descriptor || f.score)) fail("pixel feature with corner data");
      if (f.is_corner() && f.patch.size() != static_cast<std::size_t>(kPatternSize)) {
        fail("corner " + std::to_string(f.id) + " without a patch");
      }
      if (f.status() == FeatureStatus::kActive && !(f.idepth > 0.0 && f.idepth_variance > 0.0)) {
        fail("active feature " + std::to_string(f.id) + " with invalid depth");
      }
    }
  }
  for (const Keyframe& kf : map.hybrid) {
    if (kf.kind() != KeyframeKind::kHybrid) fail("indirect keyframe inside the hybrid window");
  }
  for (const Keyframe& kf : map.indirect) {
    if (kf.kind() != KeyframeKind::kIndirect) fail("hybrid keyframe in the indirect set");
    if (map.hybrid.empty() || !shares_indirect(map, kf, map.newest())) {
      fail("indirect keyframe " + std::to_string(kf.id) + " shares no features with the newest keyframe");
    }
  }
}

bool keyframe_decision(const TrackResult& track, const AffineBrightness& frame_affine, const Keyframe& reference,
                       const MapperConfig& config) {
  const double brightness = std::abs(std::log(brightness_ratio(frame_affine, reference.affine)));
  if (config.flow_weight * track.rms_flow + config.brightness_weight * brightness > 1.0) return true;
  return track.attempted_photometric > 0 &&
         track.n_p < config.min_valid_ratio * static_cast<double>(track.attempted_photometric);
}

// ---------------------------------------------------------------------------------------------
// Candidate depth filter

namespace {

constexpr double kMinSearchIdepth = 1e-4;
constexpr double kMinSearchLength = 4.0;
constexpr double kPositionVarianceFloor = 0.0625;

// Inverse depth whose projection has normalized coordinate `n` along the dominant axis.
double idepth_for(const Vector3& rotated_bearing, const Vector3& t, double n, int axis) {
  const double num = rotated_bearing[axis] - n * rotated_bearing.z();
  const double den = n * t.z() - t[axis];
  return num / den;
}

}  // namespace

EpipolarResult epipolar_search(const Feature& feature, const Keyframe& host, const ImagePyramid& frame,
                               const Pose& frame_pose, const AffineBrightness& frame_affine, double sigma2_p,
                               const Config& config) {
  EpipolarResult out;
  const MapperConfig& mc = config.mapper;
  const Pose frame_from_host = relative(frame_pose, host.pose);
  const Vector3& t = frame_from_host.translation();
  if (t.norm() < mc.b_min) return out;

  const CameraIntrinsics& camera = frame.intrinsics(0);
  const ImagePlane& plane = frame.level(0);
  const double border = kDefaultImageBorder;
  const WarpOutcome center = try_warp(camera, frame_from_host, feature.p, feature.idepth, border);
  if (!center.ok()) {
    out.status = EpipolarResult::Status::kOutlier;
    return out;
  }

  const double sigma = std::sqrt(feature.idepth_variance);
  const double d_lo = std::max(feature.idepth - 2.0 * sigma, kMinSearchIdepth);
  const double d_hi = feature.idepth + 2.0 * sigma;
  const Vector3 bearing((feature.p.x() - camera.cu) / camera.fu, (feature.p.y() - camera.cv) / camera.fv, 1.0);
  const Vector3 rb = frame_from_host.rotation() * bearing;
  const auto project_idepth = [&](double d, Vector2& p) {
    const Vector3 q = rb + t * d;
    if (!(q.z() > kDefaultMinDepth)) return false;
    p = Vector2(camera.fu * q.x() / q.z() + camera.cu, camera.fv * q.y() / q.z() + camera.cv);
    return true;
  };

  // Epipolar direction from the derivative of the projection in idepth at the estimate.
  const Vector2 dp = idepth_jacobian(camera, frame_from_host, feature.p, feature.idepth);
  if (!(dp.norm() > 1e-12)) return out;
  const Vector2 dir = dp.normalized();
  const Vector2 c = center.point.p;

  double s_lo = -kMinSearchLength / 2.0;
  double s_hi = kMinSearchLength / 2.0;
  Vector2 p_end;
  if (project_idepth(d_lo, p_end)) s_lo = std::min(s_lo, (p_end - c).dot(dir));
  if (project_idepth(d_hi, p_end)) {
    s_hi = std::max(s_hi, (p_end - c).dot(dir));
  } else {
    s_hi = std::max(s_hi, 2.0 * mc.max_epipolar_steps);
  }

  // Clip the segment to positions where the whole pattern stays inside the image.
  const auto inside = [&](double s) { return plane.inside(c + s * dir, border); };
  while (s_lo < 0.0 && !inside(s_lo)) s_lo = std::min(0.0, s_lo + 1.0);
  while (s_hi > 0.0 && !inside(s_hi)) s_hi = std::max(0.0, s_hi - 1.0);

  const int steps = std::max(2, std::min(mc.max_epipolar_steps, static_cast<int>(std::ceil(s_hi - s_lo))));
  const double h = (s_hi - s_lo) / steps;
  if (!(h > 0.0)) return out;

  const double ratio = brightness_ratio(frame_affine, host.affine);
  const auto& pattern = residual_pattern();
  const auto cost_at = [&](double s) {
    const Vector2 x = c + s * dir;
    double ssd = 0.0;
    for (int k = 0; k < kPatternSize; ++k) {
      const Vector2 q = x + pattern[static_cast<std::size_t>(k)];
      const double r = (sample_intensity_unchecked(plane, q) - frame_affine.b) -
                       ratio * (feature.patch[static_cast<std::size_t>(k)].intensity - host.affine.b);
      ssd += r * r;
    }
    return ssd;
  };

  std::vector<double> costs(static_cast<std::size_t>(steps) + 1);
  int best = 0;
  for (int i = 0; i <= steps; ++i) {
    costs[static_cast<std::size_t>(i)] = cost_at(s_lo + i * h);
    if (costs[static_cast<std::size_t>(i)] < costs[static_cast<std::size_t>(best)]) best = i;
  }
  if (best == 0 || best == steps) {
    // Minimum on the boundary: no curvature information.
    out.best_cost = costs[static_cast<std::size_t>(best)];
    const double f2 = config.tracker.outlier_energy_factor * config.tracker.outlier_energy_factor;
    if (out.best_cost / kPatternSize > f2 * sigma2_p) out.status = EpipolarResult::Status::kOutlier;
    return out;
  }
  const double cm = costs[static_cast<std::size_t>(best - 1)];
  const double c0 = costs[static_cast<std::size_t>(best)];
  const double cp = costs[static_cast<std::size_t>(best + 1)];
  const double denom = cm - 2.0 * c0 + cp;
  const double s_best = s_lo + best * h + (denom > 0.0 ? 0.5 * h * (cm - cp) / denom : 0.0);
  out.best_cost = cost_at(s_best);

  const double f2 = config.tracker.outlier_energy_factor * config.tracker.outlier_energy_factor;
  if (out.best_cost / kPatternSize > f2 * sigma2_p) {
    out.status = EpipolarResult::Status::kOutlier;
    return out;
  }
  // Quadratic model ssd ~ a (s - s*)^2 with a from the second difference.
  const double curvature = denom / (2.0 * h * h);
  if (!(curvature > 0.0)) return out;
  const double var_s = std::max(sigma2_p / curvature, kPositionVarianceFloor);

  const int axis = std::abs(dir.x()) >= std::abs(dir.y()) ? 0 : 1;
  const auto idepth_at = [&](double s) {
    const Vector2 x = c + s * dir;
    const double n = axis == 0 ? (x.x() - camera.cu) / camera.fu : (x.y() - camera.cv) / camera.fv;
    return idepth_for(rb, t, n, axis);
  };
  const double d = idepth_at(s_best);
  const double dd_ds = idepth_at(s_best + 0.5) - idepth_at(s_best - 0.5);
  if (!(d > 0.0) || !std::isfinite(d) || !std::isfinite(dd_ds)) return out;
  out.status = EpipolarResult::Status::kFused;
  out.idepth = d;
  out.idepth_variance = std::max(var_s * dd_ds * dd_ds, mc.depth_variance_floor);
  return out;
}

DepthUpdateStats update_candidate_depths(LocalMap& map, const ImagePyramid& frame, const Pose& frame_pose,
                                         const AffineBrightness& frame_affine, double sigma2_p,
                                         const Config& config) {
  DepthUpdateStats stats;
  for (Keyframe& kf : map.hybrid) {
    for (Feature& f : kf.features) {
      if (f.status() != FeatureStatus::kCandidate) continue;
      const EpipolarResult r = epipolar_search(f, kf, frame, frame_pose, frame_affine, sigma2_p, config);
      switch (r.status) {
        case EpipolarResult::Status::kFused: {
          DepthHypothesis h{f.idepth, f.idepth_variance, f.num_observations};
          h.fuse(r.idepth, r.idepth_variance);
          f.idepth = h.idepth;
          f.idepth_variance = h.idepth_variance;
          f.num_observations = h.num_observations;
          ++stats.updated;
          break;
        }
        case EpipolarResult::Status::kOutlier:
          f.transition_to(FeatureStatus::kOutlier);
          ++stats.outliers;
          break;
        case EpipolarResult::Status::kSkipped: ++stats.skipped_baseline; break;
      }
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------------------------
// Structure-only optimization

std::optional<double> refine_idepth(const Vector2& p, double idepth, const Pose& host_pose,
                                    const std::vector<std::pair<Pose, Vector2>>& observations,
                                    const CameraIntrinsics& camera, double gamma_g, int iterations) {
  if (observations.size() < 2 || !(idepth > 0.0)) return std::nullopt;
  std::vector<Pose> target_from_host;
  target_from_host.reserve(observations.size());
  for (const auto& [pose, obs] : observations) target_from_host.push_back(relative(pose, host_pose));

  const auto energy = [&](double d) {
    double e = 0.0;
    for (std::size_t i = 0; i < observations.size(); ++i) {
      const WarpOutcome w = try_warp(camera, target_from_host[i], p, d, 0.0);
      if (w.status == WarpStatus::kBehindCamera || w.status == WarpStatus::kNonPositiveDepth) {
        return std::numeric_limits<double>::infinity();
      }
      e += huber_norm((w.point.p - observations[i].second).squaredNorm(), gamma_g);
    }
    return e;
  };

  const double initial = energy(idepth);
  double d = idepth;
  for (int it = 0; it < iterations; ++it) {
    double H = 0.0;
    double b = 0.0;
    for (std::size_t i = 0; i < observations.size(); ++i) {
      const WarpOutcome w = try_warp(camera, target_from_host[i], p, d, 0.0);
      if (w.status == WarpStatus::kBehindCamera || w.status == WarpStatus::kNonPositiveDepth) continue;
      const Vector2 r = w.point.p - observations[i].second;
      const Vector2 J = idepth_jacobian(camera, target_from_host[i], p, d);
      const double wt = huber_weight(r.squaredNorm(), gamma_g);
      H += wt * J.squaredNorm();
      b += wt * J.dot(r);
    }
    if (!(H > 0.0)) break;
    const double step = -b / H;
    double next = d + step;
    if (!(next > 0.0)) next = 0.5 * d;
    d = next;
    if (std::abs(step) < 1e-12 * std::max(1.0, d)) break;
  }
  if (!std::isfinite(d) || !(energy(d) <= initial)) return std::nullopt;
  return d;
}

int structure_only_optimization(LocalMap& map, const Config& config) {
  if (map.empty()) return 0;
  std::unordered_map<FeatureId, std::vector<std::pair<Pose, Vector2>>> seen;
  for (const Keyframe* kf : map.keyframes()) {
    for (const Observation& o : kf->observations) seen[o.feature].emplace_back(kf->pose, o.obs);
  }
  const CameraIntrinsics& camera = map.newest().pyramid->intrinsics(0);
  int updated = 0;
  const auto refine_in = [&](Keyframe& kf) {
    for (Feature& f : kf.features) {
      if (!f.is_corner() || f.status() != FeatureStatus::kMarginalized) continue;
      const auto it = seen.find(f.id);
      if (it == seen.end()) continue;
      const auto d = refine_idepth(f.p, f.idepth, kf.pose, it->second, camera, config.residuals.gamma_g,
                                   config.mapper.structure_iterations);
      if (d) {
        f.idepth = *d;
        ++updated;
      }
    }
  };
  for (Keyframe& kf : map.hybrid) refine_in(kf);
  for (Keyframe& kf : map.indirect) refine_in(kf);
  return updated;
}

// ---------------------------------------------------------------------------------------------
// Marginalization

std::size_t select_marginalization(const LocalMap& map, const MapperConfig& config) {
  const std::size_t n = map.hybrid.size();
  if (n < 3) throw std::logic_error("select_marginalization needs at least three hybrid keyframes");
  const std::size_t eligible = n - 2;

  std::optional<std::size_t> sparse;
  double sparse_fraction = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < eligible; ++i) {
    const auto& features = map.hybrid[i].features;
    const auto active = std::count_if(features.begin(), features.end(),
                                      [](const Feature& f) { return f.status() == FeatureStatus::kActive; });
    const double fraction = features.empty() ? 0.0 : static_cast<double>(active) / features.size();
    if (fraction < config.min_active_fraction && fraction < sparse_fraction) {
      sparse = i;
      sparse_fraction = fraction;
    }
  }
  if (sparse) return *sparse;

  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < eligible; ++i) {
    double score = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dist = (map.hybrid[i].pose.center() - map.hybrid[j].pose.center()).norm();
      score += 1.0 / (dist + config.marginalization_epsilon);
    }
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

std::optional<KeyframeId> marginalize(LocalMap& map, const MapperConfig& config) {
  if (static_cast<int>(map.hybrid.size()) <= config.window_size) return std::nullopt;
  const std::size_t index = select_marginalization(map, config);
  Keyframe kf = std::move(map.hybrid[index]);
  map.hybrid.erase(map.hybrid.begin() + static_cast<std::ptrdiff_t>(index));

  for (Feature& f : kf.features) {
    if (f.status() == FeatureStatus::kActive) f.transition_to(FeatureStatus::kMarginalized);
  }
  // Only marginalized corners keep a role once the photometric data is gone.
  std::erase_if(kf.features, [](const Feature& f) {
    return !(f.is_corner() && f.status() == FeatureStatus::kMarginalized);
  });
  kf.demote();
  const KeyframeId id = kf.id;
  if (shares_indirect(map, kf, map.newest())) map.indirect.push_back(std::move(kf));
  std::erase_if(map.indirect, [&](const Keyframe& k) { return !shares_indirect(map, k, map.newest()); });
  return id;
}

void update_occupancy(OccupancyGrid& grid, const LocalMap& map, bool include_candidates) {
  if (map.empty()) {
    grid.clear();
    return;
  }
  const Keyframe& newest = map.newest();
  const CameraIntrinsics& camera = newest.pyramid->intrinsics(0);
  if (grid.image_width() != camera.width || grid.image_height() != camera.height) {
    grid = OccupancyGrid(camera.width, camera.height, grid.cell_size());
  }
  grid.clear();
  for (const Keyframe& kf : map.hybrid) {
    const Pose newest_from_host = relative(newest.pose, kf.pose);
    for (const Feature& f : kf.features) {
      const bool counted = f.status() == FeatureStatus::kActive ||
                           (include_candidates && f.status() == FeatureStatus::kCandidate);
      if (!counted) continue;
      const WarpOutcome w = try_warp(camera, newest_from_host, f.p, f.idepth, 0.0);
      if (w.ok()) grid.mark_block(w.point.p);
    }
  }
}

// ---------------------------------------------------------------------------------------------
// Tracker interface

TrackingReference make_tracking_reference(const LocalMap& map) {
  TrackingReference ref;
  if (map.empty()) return ref;
  const Keyframe& newest = map.newest();
  ref.keyframe = newest.id;
  ref.pose = newest.pose;
  ref.affine = newest.affine;
  const auto add = [&](const Keyframe& kf, bool hybrid) {
    const Pose ref_from_host = relative(newest.pose, kf.pose);
    for (const Feature& f : kf.features) {
      const bool active = f.status() == FeatureStatus::kActive;
      const bool marginalized_corner = f.is_corner() && f.status() == FeatureStatus::kMarginalized;
      if (!(hybrid && active) && !marginalized_corner) continue;
      TrackPoint tp;
      tp.feature = f;
      tp.ref_from_host = ref_from_host;
      tp.host_affine = kf.affine;
      tp.host_pyramid = kf.pyramid;
      tp.photometric = hybrid && active;
      tp.geometric = f.is_corner() && f.descriptor.has_value();
      ref.points.push_back(std::move(tp));
    }
  };
  for (const Keyframe& kf : map.hybrid) add(kf, true);
  for (const Keyframe& kf : map.indirect) add(kf, false);
  return ref;
}

void apply_track_outcome(LocalMap& map, const TrackResult& track, const TrackingReference& reference,
                         const FeatureConfig& config) {
  for (FeatureId id : track.photometric_outliers) {
    Feature* f = map.find_feature(id);
    if (f && f->status() == FeatureStatus::kActive) f->transition_to(FeatureStatus::kOutlier);
  }
  const auto fail_match = [&](FeatureId id) {
    Feature* f = map.find_feature(id);
    if (!f) return;
    ++f->match_failures;
    if (f->match_failures >= config.max_match_failures && f->status() == FeatureStatus::kActive) {
      f->transition_to(FeatureStatus::kOutlier);
    }
  };
  for (FeatureId id : track.unmatched_corners) fail_match(id);
  for (FeatureId id : track.geometric_outliers) fail_match(id);
  for (std::size_t point : track.inlier_matches) {
    Feature* f = map.find_feature(reference.points[point].feature.id);
    if (!f) continue;
    f->match_failures = 0;
    ++f->num_observations;
  }
}

// ---------------------------------------------------------------------------------------------
// Keyframe insertion

namespace {

struct Projected {
  Feature* feature;
  Vector2 p;
  double idepth_in_newest;
};

std::vector<Projected> project_into_newest(LocalMap& map, FeatureStatus status, bool include_newest) {
  std::vector<Projected> out;
  Keyframe& newest = map.newest();
  const CameraIntrinsics& camera = newest.pyramid->intrinsics(0);
  for (Keyframe& kf : map.hybrid) {
    if (!include_newest && kf.id == newest.id) continue;
    const Pose newest_from_host = relative(newest.pose, kf.pose);
    for (Feature& f : kf.features) {
      if (f.status() != status) continue;
      const WarpOutcome w = try_warp(camera, newest_from_host, f.p, f.idepth, 0.0);
      if (w.ok()) out.push_back({&f, w.point.p, w.point.idepth});
    }
  }
  return out;
}

// Keeps at most one active point per 3x3 block of the newest keyframe's grid; points out of view
// or crowded out are marginalized. Corners win over pixels, then the older host, then the
// lower variance.
int enforce_active_spacing(LocalMap& map) {
  Keyframe& newest = map.newest();
  const CameraIntrinsics& camera = newest.pyramid->intrinsics(0);
  struct Entry {
    Feature* feature;
    KeyframeId host;
    std::optional<Vector2> p;
  };
  std::vector<Entry> entries;
  for (Keyframe& kf : map.hybrid) {
    const Pose newest_from_host = relative(newest.pose, kf.pose);
    for (Feature& f : kf.features) {
      if (f.status() != FeatureStatus::kActive) continue;
      const WarpOutcome w = try_warp(camera, newest_from_host, f.p, f.idepth, kDefaultImageBorder);
      entries.push_back({&f, kf.id, w.ok() ? std::optional<Vector2>(w.point.p) : std::nullopt});
    }
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.feature->is_corner() != b.feature->is_corner()) return a.feature->is_corner();
    if (a.host != b.host) return a.host < b.host;
    return a.feature->idepth_variance < b.feature->idepth_variance;
  });
  map.grid.clear();
  int marginalized = 0;
  for (const Entry& e : entries) {
    if (e.p && map.grid.block_free(*e.p)) {
      map.grid.mark_block(*e.p);
    } else {
      e.feature->transition_to(FeatureStatus::kMarginalized);
      ++marginalized;
    }
  }
  return marginalized;
}

}  // namespace

InsertionReport insert_keyframe(LocalMap& map, KeyframeInput input, const Config& config, const DepthSeed& seed) {
  using Clock = std::chrono::steady_clock;
  const FeatureConfig& fc = config.features;
  InsertionReport report;

  auto start = Clock::now();
  if (!map.empty()) {
    report.depth_update =
        update_candidate_depths(map, *input.pyramid, input.pose, input.affine, input.sigma2_p, config);
  }
  report.timings.candidate_update = elapsed_ms(start);

  Keyframe kf;
  kf.id = map.allocate_keyframe_id();
  kf.frame_index = input.frame_index;
  kf.timestamp = input.timestamp;
  kf.pyramid = input.pyramid;
  kf.pose = input.pose;
  kf.affine = input.affine;
  kf.observations = std::move(input.observations);
  report.id = kf.id;
  map.hybrid.push_back(std::move(kf));
  const CameraIntrinsics& camera = map.newest().pyramid->intrinsics(0);

  start = Clock::now();
  if (map.grid.image_width() != camera.width || map.grid.image_height() != camera.height ||
      map.grid.cell_size() != fc.cell_size) {
    map.grid = OccupancyGrid(camera.width, camera.height, fc.cell_size);
  }
  report.redundant_marginalized = enforce_active_spacing(map);
  report.timings.occupancy = elapsed_ms(start);

  start = Clock::now();
  {
    // Stage one: converged candidates of older keyframes, into the actives-only grid.
    std::vector<Projected> projected = project_into_newest(map, FeatureStatus::kCandidate, false);
    std::vector<ProjectedCandidate> candidates;
    candidates.reserve(projected.size());
    for (const Projected& p : projected) candidates.push_back({p.feature, p.p});
    report.activated += static_cast<int>(
        activate_features(candidates, map.grid, fc.corner_quota, fc.pixel_quota, fc.activation_variance_ratio).size());

    // Stage two: new candidates in the remaining empty cells.
    OccupancyGrid grid = map.grid;
    update_occupancy(grid, map, true);
    const std::vector<Projected> actives = project_into_newest(map, FeatureStatus::kActive, true);
    Keyframe& newest = map.newest();
    const auto seed_depth = [&](const Vector2& p) -> std::pair<double, double> {
      if (seed) {
        if (const auto d = seed(p); d && *d > 0.0) {
          const double sigma = 0.01 * *d;
          return {*d, sigma * sigma};
        }
      }
      double best = std::numeric_limits<double>::infinity();
      double d = 1.0;
      for (const Projected& a : actives) {
        const double dist = (a.p - p).squaredNorm();
        if (dist < best) {
          best = dist;
          d = a.idepth_in_newest;
        }
      }
      const double sigma = config.mapper.candidate_initial_sigma * d;
      return {d, sigma * sigma};
    };
    std::vector<Feature> corners = std::move(input.corners);
    std::stable_sort(corners.begin(), corners.end(),
                     [](const Feature& a, const Feature& b) { return a.score.value_or(0.0) > b.score.value_or(0.0); });
    std::vector<Feature> fresh;
    for (Feature& c : corners) {
      if (static_cast<int>(fresh.size()) >= fc.corner_quota) break;
      if (c.patch.size() != static_cast<std::size_t>(kPatternSize) || !grid.block_free(c.p)) continue;
      grid.mark_block(c.p);
      fresh.push_back(c);
    }
    std::vector<Feature> pixels = sample_pixel_candidates(*newest.pyramid, grid, corners, fc.pixel_quota, fc);
    for (Feature& p : pixels) fresh.push_back(std::move(p));
    for (Feature& f : fresh) {
      f.id = map.allocate_feature_id();
      f.host_keyframe = newest.id;
      std::tie(f.idepth, f.idepth_variance) = seed_depth(f.p);
      f.num_observations = 0;
      f.match_failures = 0;
    }
    report.new_candidates = static_cast<int>(fresh.size());
    newest.features = std::move(fresh);

    if (seed) {
      std::vector<ProjectedCandidate> own;
      for (Feature& f : newest.features) own.push_back({&f, f.p});
      report.activated += static_cast<int>(
          activate_features(own, map.grid, fc.corner_quota, fc.pixel_quota, fc.activation_variance_ratio).size());
    }
  }
  report.timings.initialization = elapsed_ms(start);

  start = Clock::now();
  if (map.hybrid.size() >= 2) {
    try {
      report.ba = photometric_ba(map, config);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSingularHessian) throw;
    }
  }
  report.timings.bundle_adjustment = elapsed_ms(start);

  start = Clock::now();
  report.structure_updates = structure_only_optimization(map, config);
  report.timings.structure = elapsed_ms(start);

  start = Clock::now();
  report.demoted = marginalize(map, config.mapper);
  // BA may have shifted projections; restore the spacing invariant before publishing.
  report.redundant_marginalized += enforce_active_spacing(map);
  update_occupancy(map.grid, map, true);
  report.timings.local_map = elapsed_ms(start);
  return report;
}

}  // namespace jointvo
