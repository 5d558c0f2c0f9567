#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

#include "jointvo/error.hpp"
#include "jointvo/mapper.hpp"
#include "jointvo/residuals.hpp"

namespace jointvo {

namespace {

constexpr double kEmptyDiagonal = 1e-12;

bool depth_present(const BaNormalEquations& s, Eigen::Index i) { return s.H_dd[i] > kEmptyDiagonal; }

Eigen::VectorXd damped_camera_diagonal_solve(const Eigen::MatrixXd& S, const Eigen::VectorXd& rhs) {
  if (S.rows() == 0) return Eigen::VectorXd();
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-14) {
    throw Error(ErrorCode::kSingularHessian, "reduced camera system is not positive definite");
  }
  Eigen::VectorXd x = ldlt.solve(rhs);
  if (!x.allFinite()) throw Error(ErrorCode::kSingularHessian, "non-finite camera update");
  return x;
}

}  // namespace

std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_schur(const BaNormalEquations& s, double lambda) {
  const Eigen::Index nc = s.H_cc.rows();
  const Eigen::Index nd = s.H_dd.size();
  Eigen::VectorXd inv_dd = Eigen::VectorXd::Zero(nd);
  for (Eigen::Index i = 0; i < nd; ++i) {
    if (depth_present(s, i)) inv_dd[i] = 1.0 / (s.H_dd[i] * (1.0 + lambda));
  }
  Eigen::MatrixXd S = s.H_cc;
  S.diagonal() *= 1.0 + lambda;
  S.noalias() -= s.H_cd * inv_dd.asDiagonal() * s.H_cd.transpose();
  const Eigen::VectorXd rhs = -s.b_c + s.H_cd * inv_dd.cwiseProduct(s.b_d);
  const Eigen::VectorXd x_c = damped_camera_diagonal_solve(S, rhs);
  Eigen::VectorXd x_d = -inv_dd.cwiseProduct(s.b_d);
  if (nc > 0) x_d.noalias() -= inv_dd.cwiseProduct(s.H_cd.transpose() * x_c);
  return {x_c, x_d};
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> solve_dense(const BaNormalEquations& s, double lambda) {
  const Eigen::Index nc = s.H_cc.rows();
  const Eigen::Index nd = s.H_dd.size();
  std::vector<Eigen::Index> present;
  for (Eigen::Index i = 0; i < nd; ++i) {
    if (depth_present(s, i)) present.push_back(i);
  }
  const Eigen::Index np = static_cast<Eigen::Index>(present.size());
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nc + np, nc + np);
  Eigen::VectorXd b(nc + np);
  H.topLeftCorner(nc, nc) = s.H_cc;
  b.head(nc) = s.b_c;
  for (Eigen::Index k = 0; k < np; ++k) {
    const Eigen::Index i = present[static_cast<std::size_t>(k)];
    H.block(0, nc + k, nc, 1) = s.H_cd.col(i);
    H.block(nc + k, 0, 1, nc) = s.H_cd.col(i).transpose();
    H(nc + k, nc + k) = s.H_dd[i];
    b[nc + k] = s.b_d[i];
  }
  H.diagonal() *= 1.0 + lambda;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw Error(ErrorCode::kSingularHessian, "dense BA system is not positive definite");
  }
  const Eigen::VectorXd x = -ldlt.solve(b);
  Eigen::VectorXd x_d = Eigen::VectorXd::Zero(nd);
  for (Eigen::Index k = 0; k < np; ++k) x_d[present[static_cast<std::size_t>(k)]] = x[nc + k];
  return {x.head(nc), x_d};
}

PhotometricBundle::PhotometricBundle(LocalMap& map, const Config& config) : map_(map), config_(config) {
  const std::size_t n = map.hybrid.size();
  cameras_.assign(n, -1);
  for (std::size_t i = 1; i < n; ++i) cameras_[i] = static_cast<int>(i) - 1;

  // Gauge: the oldest pose and affine parameters, plus its best-constrained depth.
  Feature* anchor = nullptr;
  for (std::size_t i = 0; i < n && !anchor; ++i) {
    for (Feature& f : map.hybrid[i].features) {
      if (f.status() != FeatureStatus::kActive) continue;
      if (!anchor || f.idepth_variance < anchor->idepth_variance) anchor = &f;
    }
  }
  if (anchor) anchor_ = anchor->id;

  for (std::size_t h = 0; h < n; ++h) {
    for (Feature& f : map.hybrid[h].features) {
      if (f.status() != FeatureStatus::kActive || f.patch.size() != static_cast<std::size_t>(kPatternSize)) continue;
      int depth_index = -1;
      if (&f != anchor) {
        depth_index = static_cast<int>(depths_.size());
        depths_.push_back(&f);
      }
      for (std::size_t t = 0; t < n; ++t) {
        if (t != h) terms_.push_back({h, t, &f, depth_index});
      }
    }
  }
}

namespace {

struct TermLinearization {
  bool valid = false;
  PatternVector r = PatternVector::Zero();
  PatternJacobian J_target = PatternJacobian::Zero();
  PatternJacobian J_host = PatternJacobian::Zero();
  PatternVector J_depth = PatternVector::Zero();
  double energy = 0.0;
};

TermLinearization linearize_term(const Keyframe& host, const Keyframe& target, const Feature& f, bool jacobians) {
  TermLinearization out;
  const CameraIntrinsics& camera = target.pyramid->intrinsics(0);
  const ImagePlane& plane = target.pyramid->level(0);
  const Pose target_from_host = target.pose * host.pose.inverse();
  const Matrix6 adjoint = target_from_host.adjoint();
  const double ratio = brightness_ratio(target.affine, host.affine);
  const auto& pattern = residual_pattern();
  for (int k = 0; k < kPatternSize; ++k) {
    const Vector2 p = f.p + pattern[static_cast<std::size_t>(k)];
    const WarpOutcome w = try_warp(camera, target_from_host, p, f.idepth);
    if (!w.ok()) return TermLinearization{};
    const double host_term = f.patch[static_cast<std::size_t>(k)].intensity - host.affine.b;
    // Intensity and interpolant gradient, matching photometric_residual().
    const int u0 = std::clamp(static_cast<int>(std::floor(w.point.p.x())), 0, plane.width() - 2);
    const int v0 = std::clamp(static_cast<int>(std::floor(w.point.p.y())), 0, plane.height() - 2);
    const double fu = w.point.p.x() - u0;
    const double fv = w.point.p.y() - v0;
    const double i00 = plane.intensity(u0, v0);
    const double i10 = plane.intensity(u0 + 1, v0);
    const double i01 = plane.intensity(u0, v0 + 1);
    const double i11 = plane.intensity(u0 + 1, v0 + 1);
    const double intensity = (1.0 - fv) * ((1.0 - fu) * i00 + fu * i10) + fv * ((1.0 - fu) * i01 + fu * i11);
    out.r[k] = (intensity - target.affine.b) - ratio * host_term;
    if (!jacobians) continue;
    const Eigen::RowVector2d grad((1.0 - fv) * (i10 - i00) + fv * (i11 - i01),
                                  (1.0 - fu) * (i01 - i00) + fu * (i11 - i10));
    const Eigen::Matrix<double, 1, 6> j_pose = grad * projection_jacobian(camera, w.camera_point);
    out.J_target.block<1, 6>(k, 0) = j_pose;
    out.J_target(k, 6) = -ratio * host_term;
    out.J_target(k, 7) = -1.0;
    out.J_host.block<1, 6>(k, 0) = -j_pose * adjoint;
    out.J_host(k, 6) = ratio * host_term;
    out.J_host(k, 7) = ratio;
    out.J_depth[k] = grad.dot(idepth_jacobian(camera, target_from_host, p, f.idepth));
  }
  out.energy = out.r.squaredNorm();
  out.valid = true;
  return out;
}

}  // namespace

BaNormalEquations PhotometricBundle::linearize() const {
  const Eigen::Index nc = 8 * static_cast<Eigen::Index>(std::max<std::size_t>(map_.hybrid.size(), 1) - 1);
  const Eigen::Index nd = static_cast<Eigen::Index>(depths_.size());
  BaNormalEquations s;
  s.H_cc = Eigen::MatrixXd::Zero(nc, nc);
  s.b_c = Eigen::VectorXd::Zero(nc);
  s.H_cd = Eigen::MatrixXd::Zero(nc, nd);
  s.H_dd = Eigen::VectorXd::Zero(nd);
  s.b_d = Eigen::VectorXd::Zero(nd);
  const double gamma = config_.residuals.gamma_p;
  for (const Term& term : terms_) {
    const TermLinearization lin =
        linearize_term(map_.hybrid[term.host], map_.hybrid[term.target], *term.feature, true);
    if (!lin.valid) continue;
    const double w = photometric_block_weight(lin.energy, gamma);
    s.energy += photometric_block_cost(lin.energy, gamma);
    const int ch = cameras_[term.host];
    const int ct = cameras_[term.target];
    const int d = term.depth_index;
    if (ch >= 0) {
      s.H_cc.block<8, 8>(8 * ch, 8 * ch).noalias() += w * lin.J_host.transpose() * lin.J_host;
      s.b_c.segment<8>(8 * ch).noalias() += w * lin.J_host.transpose() * lin.r;
    }
    if (ct >= 0) {
      s.H_cc.block<8, 8>(8 * ct, 8 * ct).noalias() += w * lin.J_target.transpose() * lin.J_target;
      s.b_c.segment<8>(8 * ct).noalias() += w * lin.J_target.transpose() * lin.r;
    }
    if (ch >= 0 && ct >= 0) {
      const Matrix8 cross = w * lin.J_host.transpose() * lin.J_target;
      s.H_cc.block<8, 8>(8 * ch, 8 * ct) += cross;
      s.H_cc.block<8, 8>(8 * ct, 8 * ch) += cross.transpose();
    }
    if (d >= 0) {
      s.H_dd[d] += w * lin.J_depth.squaredNorm();
      s.b_d[d] += w * lin.J_depth.dot(lin.r);
      if (ch >= 0) s.H_cd.block<8, 1>(8 * ch, d) += w * lin.J_host.transpose() * lin.J_depth;
      if (ct >= 0) s.H_cd.block<8, 1>(8 * ct, d) += w * lin.J_target.transpose() * lin.J_depth;
    }
  }
  return s;
}

double PhotometricBundle::energy() const {
  double e = 0.0;
  const double gamma = config_.residuals.gamma_p;
  for (const Term& term : terms_) {
    const TermLinearization lin =
        linearize_term(map_.hybrid[term.host], map_.hybrid[term.target], *term.feature, false);
    if (lin.valid) e += photometric_block_cost(lin.energy, gamma);
  }
  return e;
}

bool PhotometricBundle::apply(const Eigen::VectorXd& cameras, const Eigen::VectorXd& depths) {
  for (Eigen::Index i = 0; i < depths.size(); ++i) {
    if (!(depths_[static_cast<std::size_t>(i)]->idepth + depths[i] > 0.0)) return false;
  }
  for (std::size_t k = 0; k < map_.hybrid.size(); ++k) {
    const int c = cameras_[k];
    if (c < 0) continue;
    Keyframe& kf = map_.hybrid[k];
    const Vector8 delta = cameras.segment<8>(8 * c);
    kf.pose = exp(delta.head<6>()) * kf.pose;
    kf.affine.a += delta[6];
    kf.affine.b += delta[7];
  }
  for (Eigen::Index i = 0; i < depths.size(); ++i) depths_[static_cast<std::size_t>(i)]->idepth += depths[i];
  return true;
}

double PhotometricBundle::residual_variance() const {
  std::vector<double> rows;
  for (const Term& term : terms_) {
    const TermLinearization lin =
        linearize_term(map_.hybrid[term.host], map_.hybrid[term.target], *term.feature, false);
    if (!lin.valid) continue;
    for (int k = 0; k < kPatternSize; ++k) rows.push_back(lin.r[k]);
  }
  return mad_variance(rows, config_.residuals.variance_floor);
}

std::unordered_map<FeatureId, std::pair<int, int>> PhotometricBundle::outlier_votes(double threshold) const {
  std::unordered_map<FeatureId, std::pair<int, int>> votes;
  for (const Term& term : terms_) {
    const TermLinearization lin =
        linearize_term(map_.hybrid[term.host], map_.hybrid[term.target], *term.feature, false);
    if (!lin.valid) continue;
    auto& v = votes[term.feature->id];
    ++v.first;
    if (lin.energy / kPatternSize > threshold) ++v.second;
  }
  return votes;
}

BaResult photometric_ba(LocalMap& map, const Config& config) {
  BaResult result;
  if (map.hybrid.size() < 2) return result;
  const MapperConfig& mc = config.mapper;
  PhotometricBundle bundle(map, config);

  struct Snapshot {
    std::vector<std::pair<Pose, AffineBrightness>> keyframes;
    std::vector<double> depths;
  };
  std::vector<Feature*> active;
  for (Keyframe& kf : map.hybrid) {
    for (Feature& f : kf.features) {
      if (f.status() == FeatureStatus::kActive) active.push_back(&f);
    }
  }
  const auto snapshot = [&] {
    Snapshot s;
    for (const Keyframe& kf : map.hybrid) s.keyframes.emplace_back(kf.pose, kf.affine);
    for (const Feature* f : active) s.depths.push_back(f->idepth);
    return s;
  };
  const auto restore = [&](const Snapshot& s) {
    for (std::size_t i = 0; i < map.hybrid.size(); ++i) {
      map.hybrid[i].pose = s.keyframes[i].first;
      map.hybrid[i].affine = s.keyframes[i].second;
    }
    for (std::size_t i = 0; i < active.size(); ++i) active[i]->idepth = s.depths[i];
  };

  BaNormalEquations system = bundle.linearize();
  double energy = system.energy;
  result.initial_energy = energy;
  result.energy_trace.push_back(energy);
  double lambda = mc.ba_lambda_init;
  for (int it = 0; it < mc.ba_iterations; ++it) {
    ++result.iterations;
    auto [x_c, x_d] = solve_schur(system, lambda);
    const double step = std::sqrt(x_c.squaredNorm() + x_d.squaredNorm());
    if (step < mc.ba_convergence_eps) break;
    const Snapshot before = snapshot();
    if (!bundle.apply(x_c, x_d)) {
      lambda *= config.tracker.lm_lambda_up;
      continue;
    }
    const double candidate = bundle.energy();
    if (std::isfinite(candidate) && candidate < energy) {
      energy = candidate;
      result.energy_trace.push_back(energy);
      ++result.accepted;
      lambda = std::max(lambda * config.tracker.lm_lambda_down, 1e-12);
      system = bundle.linearize();
    } else {
      restore(before);
      lambda *= config.tracker.lm_lambda_up;
      if (lambda > 1e8) break;
    }
  }
  result.final_energy = energy;

  // Posterior depth variances from the depth diagonal, then outlier votes.
  const double sigma2 = bundle.residual_variance();
  const BaNormalEquations final_system = bundle.linearize();
  const auto& free_depths = bundle.depth_features();
  for (std::size_t i = 0; i < free_depths.size(); ++i) {
    const double h = final_system.H_dd[static_cast<Eigen::Index>(i)];
    if (h > kEmptyDiagonal) free_depths[i]->idepth_variance = std::max(sigma2 / h, mc.depth_variance_floor);
  }
  const double f2 = config.tracker.outlier_energy_factor * config.tracker.outlier_energy_factor;
  for (const auto& [id, vote] : bundle.outlier_votes(f2 * sigma2)) {
    if (2 * vote.second <= vote.first) continue;
    Feature* f = map.find_feature(id);
    if (f && f->status() == FeatureStatus::kActive && id != bundle.anchor()) {
      f->transition_to(FeatureStatus::kOutlier);
      ++result.outliers;
    }
  }
  return result;
}

}  // namespace jointvo
