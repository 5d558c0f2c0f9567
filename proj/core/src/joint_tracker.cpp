#include "jointvo/joint_tracker.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <tuple>

#include <Eigen/Cholesky>

#include "jointvo/error.hpp"

namespace jointvo {

double utility_K(double level, double num_geometric, const UtilityConfig& config) {
  return config.scale * std::exp(-config.level_decay * level) /
         (1.0 + std::exp((config.midpoint - num_geometric) / config.slope));
}

StateIncrement joint_step(const ResidualSystem& system, double K, double lambda) {
  Matrix8 H_p = Matrix8::Zero();
  Vector8 b_p = Vector8::Zero();
  Matrix8 H_g = Matrix8::Zero();
  Vector8 b_g = Vector8::Zero();
  bool any = false;
  for (const PhotometricBlock& block : system.photometric) {
    if (!block.valid) continue;
    any = true;
    H_p.noalias() += block.w * block.J.transpose() * block.J;
    b_p.noalias() += block.w * block.J.transpose() * block.r;
  }
  for (const GeometricBlock& block : system.geometric) {
    if (!block.valid) continue;
    any = true;
    H_g.noalias() += block.w * block.J.transpose() * block.J;
    b_g.noalias() += block.w * block.J.transpose() * block.r;
  }
  if (!any) throw Error(ErrorCode::kEmptySystem, "joint step without valid blocks");

  Matrix8 H = Matrix8::Zero();
  Vector8 b = Vector8::Zero();
  if (system.n_p > 0) {
    const double s = 1.0 / (system.n_p * system.sigma2_p);
    H += s * H_p;
    b += s * b_p;
  }
  if (system.n_g > 0 && K > 0.0) {
    const double s = K / (system.n_g * system.sigma2_g);
    H += s * H_g;
    b += s * b_g;
  }

  // Variables with no information at all (affine terms of a geometric-only system) are held.
  const double max_diag = H.diagonal().maxCoeff();
  if (!(max_diag > 0.0) || !std::isfinite(max_diag)) {
    throw Error(ErrorCode::kSingularHessian, "joint Hessian has no positive diagonal");
  }
  std::array<int, 8> free{};
  int n = 0;
  for (int i = 0; i < 8; ++i) {
    if (H(i, i) > 1e-14 * max_diag) free[static_cast<std::size_t>(n++)] = i;
  }
  Eigen::MatrixXd Hr(n, n);
  Eigen::VectorXd br(n);
  for (int i = 0; i < n; ++i) {
    br[i] = b[free[static_cast<std::size_t>(i)]];
    for (int j = 0; j < n; ++j) Hr(i, j) = H(free[static_cast<std::size_t>(i)], free[static_cast<std::size_t>(j)]);
    Hr(i, i) *= 1.0 + lambda;
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(Hr);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-15) {
    throw Error(ErrorCode::kSingularHessian, "damped joint Hessian is not positive definite");
  }
  const Eigen::VectorXd xr = -ldlt.solve(br);
  if (!xr.allFinite()) throw Error(ErrorCode::kSingularHessian, "non-finite joint step");
  StateIncrement delta = StateIncrement::Zero();
  for (int i = 0; i < n; ++i) delta[free[static_cast<std::size_t>(i)]] = xr[i];
  return delta;
}

namespace {

struct GeometricInput {
  std::size_t point = 0;
  Vector2 obs = Vector2::Zero();
  double w_d = 1.0;
};

class LevelProblem {
 public:
  LevelProblem(const TrackingReference& reference, const ImagePyramid& frame, int level, const Config& config,
               const std::vector<std::size_t>& photometric_points, const std::vector<std::uint8_t>& photometric_alive,
               const std::vector<GeometricInput>& geometric, const std::vector<std::uint8_t>& geometric_alive)
      : reference_(reference),
        plane_(frame.level(level)),
        camera_(frame.intrinsics(level)),
        level_(level),
        config_(config),
        geometric_(geometric),
        geometric_alive_(geometric_alive) {
    hosts_.resize(photometric_points.size());
    host_ok_.assign(photometric_points.size(), 0);
    for (std::size_t k = 0; k < photometric_points.size(); ++k) {
      if (!photometric_alive[k]) continue;
      const TrackPoint& tp = reference.points[photometric_points[k]];
      host_ok_[k] = host_at_level(tp.feature, *tp.host_pyramid, level, tp.host_affine, tp.ref_from_host, hosts_[k]);
    }
  }

  ResidualSystem evaluate(const FrameState& state) const {
    ResidualSystem system;
    const double gamma_p = config_.residuals.gamma_p;
    const double gamma_g = config_.residuals.gamma_g;
    for (std::size_t k = 0; k < hosts_.size(); ++k) {
      if (!host_ok_[k]) continue;
      PhotometricBlock block = photometric_residual(hosts_[k], plane_, state, camera_, gamma_p);
      block.source = k;
      system.photometric.push_back(block);
    }
    for (std::size_t j = 0; j < geometric_.size(); ++j) {
      if (!geometric_alive_[j]) continue;
      const TrackPoint& tp = reference_.points[geometric_[j].point];
      GeometricBlock block =
          geometric_residual(to_level(tp.feature.p, level_), tp.feature.idepth, tp.ref_from_host,
                             to_level(geometric_[j].obs, level_), state, camera_, geometric_[j].w_d, gamma_g);
      block.source = j;
      system.geometric.push_back(block);
    }
    system.recount();
    return system;
  }

  const CameraIntrinsics& camera() const { return camera_; }

 private:
  const TrackingReference& reference_;
  const ImagePlane& plane_;
  CameraIntrinsics camera_;
  int level_;
  const Config& config_;
  const std::vector<GeometricInput>& geometric_;
  const std::vector<std::uint8_t>& geometric_alive_;
  std::vector<PhotometricHost> hosts_;
  std::vector<std::uint8_t> host_ok_;
};

// Energy over the blocks that were valid at level entry. Blocks that have since become invalid
// are charged as a residual at twice the Huber threshold so that leaving the image is never free.
double joint_energy(const ResidualSystem& system, const std::vector<std::uint8_t>& entry_p,
                    const std::vector<std::uint8_t>& entry_g, int n_p, int n_g, double sigma2_p, double sigma2_g,
                    double K, const ResidualConfig& rc) {
  double e_p = 0.0;
  for (const PhotometricBlock& b : system.photometric) {
    if (!entry_p[b.source]) continue;
    e_p += b.valid ? photometric_block_cost(b.energy, rc.gamma_p)
                   : photometric_block_cost(kPatternSize * 4.0 * rc.gamma_p * rc.gamma_p, rc.gamma_p);
  }
  double e_g = 0.0;
  for (const GeometricBlock& b : system.geometric) {
    if (!entry_g[b.source]) continue;
    e_g += b.valid ? b.w_d * huber_norm(b.energy(), rc.gamma_g) : b.w_d * huber_norm(4.0 * rc.gamma_g * rc.gamma_g, rc.gamma_g);
  }
  double e = 0.0;
  if (n_p > 0) e += e_p / (n_p * sigma2_p);
  if (n_g > 0 && K > 0.0) e += K * e_g / (n_g * sigma2_g);
  return e;
}

// Restricts a system to its entry-valid blocks and pins the normalizers for the level.
ResidualSystem pinned(ResidualSystem system, const std::vector<std::uint8_t>& entry_p,
                      const std::vector<std::uint8_t>& entry_g, int n_p, int n_g, double sigma2_p, double sigma2_g) {
  for (PhotometricBlock& b : system.photometric) b.valid = b.valid && entry_p[b.source];
  for (GeometricBlock& b : system.geometric) b.valid = b.valid && entry_g[b.source];
  system.n_p = n_p;
  system.n_g = n_g;
  system.sigma2_p = sigma2_p;
  system.sigma2_g = sigma2_g;
  return system;
}

constexpr double kMaxLambda = 1e8;

}  // namespace

TrackResult track_frame(const TrackingReference& reference, const TrackingFrame& frame, const FrameState& prior,
                        const Config& config) {
  const TrackerConfig& tc = config.tracker;
  const ResidualConfig& rc = config.residuals;
  const ImagePyramid& pyramid = *frame.pyramid;
  const int num_levels = std::min(tc.num_levels, pyramid.num_levels());

  TrackResult result;
  FrameState state = prior;
  state.affine.t = pyramid.exposure();

  using Clock = std::chrono::steady_clock;
  const auto ms_since = [](Clock::time_point t) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
  };
  auto clock = Clock::now();

  // Descriptor matching happens once, at full resolution.
  std::vector<GeometricInput> geometric;
  if (tc.use_indirect && !frame.corners.empty()) {
    std::vector<MatchQuery> queries;
    std::vector<std::size_t> query_points;
    for (std::size_t i = 0; i < reference.points.size(); ++i) {
      const TrackPoint& tp = reference.points[i];
      if (!tp.geometric || !tp.feature.descriptor) continue;
      queries.push_back({&tp.feature, tp.ref_from_host});
      query_points.push_back(i);
    }
    MatchResult matched = match_corners(queries, pyramid.intrinsics(0), frame.corners, prior,
                                        config.features.search_window, config.features);
    double max_inv_var = 0.0;
    for (Match& m : matched.matches) {
      m.map_index = query_points[m.map_index];
      max_inv_var = std::max(max_inv_var, 1.0 / reference.points[m.map_index].feature.idepth_variance);
    }
    for (const Match& m : matched.matches) {
      const double w_d = depth_variance_weight(reference.points[m.map_index].feature.idepth_variance, max_inv_var);
      geometric.push_back({m.map_index, m.obs, w_d});
    }
    result.matches = std::move(matched.matches);
    result.unmatched_corners = std::move(matched.unmatched_visible);
  }

  result.matching_ms = ms_since(clock);
  clock = Clock::now();

  std::vector<std::size_t> photometric_points;
  for (std::size_t i = 0; i < reference.points.size(); ++i) {
    const TrackPoint& tp = reference.points[i];
    if (!tp.photometric || tp.feature.patch.size() != static_cast<std::size_t>(kPatternSize)) continue;
    if (tp.feature.is_corner() && !tc.corner_photometric) continue;
    photometric_points.push_back(i);
  }
  result.attempted_photometric = static_cast<int>(photometric_points.size());

  std::vector<std::uint8_t> photometric_alive(photometric_points.size(), 1);
  std::vector<std::uint8_t> geometric_alive(geometric.size(), 1);
  int inlier_geometric = static_cast<int>(geometric.size());
  bool converged_all = true;

  for (int level = num_levels - 1; level >= 0; --level) {
    const int stage = num_levels - 1 - level;
    const LevelProblem problem(reference, pyramid, level, config, photometric_points, photometric_alive, geometric,
                               geometric_alive);
    ResidualSystem system = problem.evaluate(state);
    LevelStats stats;
    stats.level = level;

    if (system.n_p + system.n_g > 0) {
      const auto [sigma2_p, sigma2_g] = estimate_variances(system, rc.variance_floor);
      const int n_p = system.n_p;
      const int n_g = system.n_g;
      std::vector<std::uint8_t> entry_p(photometric_points.size(), 0);
      std::vector<std::uint8_t> entry_g(geometric.size(), 0);
      for (const PhotometricBlock& b : system.photometric) entry_p[b.source] = b.valid;
      for (const GeometricBlock& b : system.geometric) entry_g[b.source] = b.valid;

      const double N_g = stage == 0 ? static_cast<double>(inlier_geometric) : static_cast<double>(n_g);
      double K = tc.force_k ? *tc.force_k : utility_K(stage, N_g, tc.utility);
      result.K_trace.push_back(K);
      stats.K = K;
      stats.sigma2_p = sigma2_p;
      stats.sigma2_g = sigma2_g;

      double lambda = tc.lm_lambda_init;
      double energy = joint_energy(system, entry_p, entry_g, n_p, n_g, sigma2_p, sigma2_g, K, rc);
      std::vector<double> trace{energy};
      bool level_converged = false;
      for (int it = 0; it < tc.max_iterations_per_level; ++it) {
        StateIncrement delta;
        try {
          delta = joint_step(pinned(system, entry_p, entry_g, n_p, n_g, sigma2_p, sigma2_g), K, lambda);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kSingularHessian && e.code() != ErrorCode::kEmptySystem) throw;
          break;
        }
        ++stats.iterations;
        if (delta.norm() < tc.convergence_eps) {
          level_converged = true;
          break;
        }
        const FrameState candidate = oplus(delta, state);
        ResidualSystem candidate_system = problem.evaluate(candidate);
        const double candidate_energy =
            joint_energy(candidate_system, entry_p, entry_g, n_p, n_g, sigma2_p, sigma2_g, K, rc);
        if (std::isfinite(candidate_energy) && candidate_energy < energy) {
          state = candidate;
          system = std::move(candidate_system);
          energy = candidate_energy;
          trace.push_back(energy);
          lambda = std::max(lambda * tc.lm_lambda_down, 1e-12);
        } else {
          lambda *= tc.lm_lambda_up;
          if (lambda > kMaxLambda) {
            level_converged = true;
            break;
          }
        }
      }
      converged_all = converged_all && level_converged;
      result.energy_trace.push_back(std::move(trace));

      // Level end: fresh variances, then outlier removal before the next level.
      system.recount();
      double s2p = sigma2_p;
      double s2g = sigma2_g;
      if (system.n_p + system.n_g > 0) std::tie(s2p, s2g) = estimate_variances(system, rc.variance_floor);
      const double f2 = tc.outlier_energy_factor * tc.outlier_energy_factor;
      std::vector<FeatureId> p_out;
      std::vector<FeatureId> g_out;
      for (const PhotometricBlock& b : system.photometric) {
        if (b.valid && b.energy / kPatternSize > f2 * s2p) {
          photometric_alive[b.source] = 0;
          p_out.push_back(reference.points[photometric_points[b.source]].feature.id);
        }
      }
      for (const GeometricBlock& b : system.geometric) {
        if (b.valid && b.energy() / 2.0 > f2 * s2g) {
          geometric_alive[b.source] = 0;
          g_out.push_back(reference.points[geometric[b.source].point].feature.id);
        }
      }
      int valid_p = 0;
      for (const PhotometricBlock& b : system.photometric) valid_p += b.valid && photometric_alive[b.source];
      inlier_geometric = 0;
      for (const GeometricBlock& b : system.geometric) inlier_geometric += b.valid && geometric_alive[b.source];
      stats.n_p = valid_p;
      stats.n_g = inlier_geometric;

      if (level == 0) {
        result.final_energy = joint_energy(system, entry_p, entry_g, n_p, n_g, sigma2_p, sigma2_g, K, rc);
        result.photometric_outliers = std::move(p_out);
        result.geometric_outliers = std::move(g_out);
        result.sigma2_p = s2p;
        result.sigma2_g = s2g;
        for (const GeometricBlock& b : system.geometric) {
          if (b.valid && geometric_alive[b.source]) result.inlier_matches.push_back(geometric[b.source].point);
        }
      }
    } else {
      converged_all = false;
      result.energy_trace.emplace_back();
    }
    result.levels.push_back(stats);
  }

  const LevelStats& finest = result.levels.back();
  result.n_p = finest.n_p;
  result.n_g = finest.n_g;
  if (!state.pose_tangent.allFinite() || (finest.n_p < tc.min_track_points && finest.n_g < tc.min_track_matches)) {
    throw Error(ErrorCode::kTrackingLost, "finest level kept " + std::to_string(finest.n_p) +
                                              " photometric blocks and " + std::to_string(finest.n_g) + " matches");
  }

  // Flow of the surviving photometric points, used by the keyframe decision.
  const CameraIntrinsics& camera = pyramid.intrinsics(0);
  const Pose cur_from_ref = state.pose();
  double flow2 = 0.0;
  int flow_n = 0;
  for (std::size_t k = 0; k < photometric_points.size(); ++k) {
    if (!photometric_alive[k]) continue;
    const TrackPoint& tp = reference.points[photometric_points[k]];
    const WarpOutcome a = try_warp(camera, cur_from_ref * tp.ref_from_host, tp.feature.p, tp.feature.idepth, 0.0);
    const WarpOutcome b = try_warp(camera, tp.ref_from_host, tp.feature.p, tp.feature.idepth, 0.0);
    if (a.status == WarpStatus::kBehindCamera || b.status == WarpStatus::kBehindCamera ||
        a.status == WarpStatus::kNonPositiveDepth || b.status == WarpStatus::kNonPositiveDepth) {
      continue;
    }
    flow2 += (a.point.p - b.point.p).squaredNorm();
    ++flow_n;
  }
  result.rms_flow = flow_n > 0 ? std::sqrt(flow2 / flow_n) : 0.0;
  result.optimization_ms = ms_since(clock);
  result.state = state;
  result.converged = converged_all;
  return result;
}

FrameState constant_velocity_prior(std::span<const PoseRecord> history, const Pose& reference_pose) {
  FrameState prior;
  if (history.empty()) return prior;
  prior.affine = history.back().affine;
  if (history.size() < 2) return prior;
  const Pose& last = history[history.size() - 1].pose;
  const Pose& before = history[history.size() - 2].pose;
  const Pose predicted = (last * before.inverse()) * last;
  prior.pose_tangent = log(predicted * reference_pose.inverse());
  return prior;
}

}  // namespace jointvo
