#include "jointvo/residuals.hpp"

#include <algorithm>
#include <cmath>

#include "jointvo/error.hpp"

namespace jointvo {

namespace {

constexpr double kMadScale = 1.4826;

// Intensity and the exact derivative of the bilinear interpolant, so that analytic Jacobians
// agree with differentiation of the sampled residual itself.
PixelSample sample_with_interpolant_gradient(const ImagePlane& plane, const Vector2& p) {
  const int w = plane.width();
  const int u0 = std::clamp(static_cast<int>(std::floor(p.x())), 0, w - 2);
  const int v0 = std::clamp(static_cast<int>(std::floor(p.y())), 0, plane.height() - 2);
  const double fu = p.x() - u0;
  const double fv = p.y() - v0;
  const double i00 = plane.intensity(u0, v0);
  const double i10 = plane.intensity(u0 + 1, v0);
  const double i01 = plane.intensity(u0, v0 + 1);
  const double i11 = plane.intensity(u0 + 1, v0 + 1);
  PixelSample s;
  s.intensity = (1.0 - fv) * ((1.0 - fu) * i00 + fu * i10) + fv * ((1.0 - fu) * i01 + fu * i11);
  s.grad_u = (1.0 - fv) * (i10 - i00) + fv * (i11 - i01);
  s.grad_v = (1.0 - fu) * (i01 - i00) + fu * (i11 - i10);
  return s;
}

double median_inplace(std::vector<double>& values) {
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
  std::nth_element(values.begin(), mid, values.end());
  double m = *mid;
  if (values.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(values.begin(), mid));
  }
  return m;
}

}  // namespace

void ResidualSystem::recount() {
  n_p = static_cast<int>(std::count_if(photometric.begin(), photometric.end(),
                                       [](const PhotometricBlock& b) { return b.valid; }));
  n_g = static_cast<int>(
      std::count_if(geometric.begin(), geometric.end(), [](const GeometricBlock& b) { return b.valid; }));
}

double huber_weight(double e, double gamma) { return e < gamma * gamma ? 1.0 : gamma / std::sqrt(e); }

double huber_norm(double e, double gamma) {
  return e < gamma * gamma ? e : 2.0 * gamma * std::sqrt(e) - gamma * gamma;
}

double depth_variance_weight(double sigma_d2, double max_inv_var) { return (1.0 / sigma_d2) / max_inv_var; }

double photometric_block_weight(double energy, double gamma_p) {
  return huber_weight(energy / kPatternSize, gamma_p);
}

double photometric_block_cost(double energy, double gamma_p) {
  return kPatternSize * huber_norm(energy / kPatternSize, gamma_p);
}

Matrix2x6 projection_jacobian(const CameraIntrinsics& camera, const Vector3& x) {
  const double iz = 1.0 / x.z();
  const double u = x.x() * iz;
  const double v = x.y() * iz;
  Matrix2x6 J;
  J << camera.fu * iz, 0.0, -camera.fu * u * iz, -camera.fu * u * v, camera.fu * (1.0 + u * u), -camera.fu * v,
      0.0, camera.fv * iz, -camera.fv * v * iz, -camera.fv * (1.0 + v * v), camera.fv * u * v, camera.fv * u;
  return J;
}

Vector2 idepth_jacobian(const CameraIntrinsics& camera, const Pose& target_from_host, const Vector2& p,
                        double idepth) {
  const Vector3 bearing((p.x() - camera.cu) / camera.fu, (p.y() - camera.cv) / camera.fv, 1.0);
  const Vector3& t = target_from_host.translation();
  const Vector3 q = target_from_host.rotation() * bearing + t * idepth;
  const double iz = 1.0 / q.z();
  return Vector2(camera.fu * (t.x() - q.x() * iz * t.z()) * iz, camera.fv * (t.y() - q.y() * iz * t.z()) * iz);
}

PhotometricHost host_from_patch(const Feature& feature, const AffineBrightness& host_affine,
                                const Pose& base_from_host) {
  PhotometricHost host;
  host.p = feature.p;
  host.idepth = feature.idepth;
  host.affine = host_affine;
  host.base_from_host = base_from_host;
  for (int k = 0; k < kPatternSize; ++k) host.intensities[k] = feature.patch.at(static_cast<std::size_t>(k)).intensity;
  return host;
}

bool host_at_level(const Feature& feature, const ImagePyramid& host_pyramid, int level,
                   const AffineBrightness& host_affine, const Pose& base_from_host, PhotometricHost& out) {
  if (level == 0 && feature.patch.size() == static_cast<std::size_t>(kPatternSize)) {
    out = host_from_patch(feature, host_affine, base_from_host);
    return true;
  }
  const ImagePlane& plane = host_pyramid.level(level);
  out.p = to_level(feature.p, level);
  out.idepth = feature.idepth;
  out.affine = host_affine;
  out.base_from_host = base_from_host;
  const auto& pattern = residual_pattern();
  for (int k = 0; k < kPatternSize; ++k) {
    const Vector2 q = out.p + pattern[static_cast<std::size_t>(k)];
    if (!plane.inside(q, 0.0)) return false;
    out.intensities[k] = sample_intensity_unchecked(plane, q);
  }
  return true;
}

PhotometricBlock photometric_residual(const PhotometricHost& host, const ImagePlane& cur, const FrameState& state,
                                      const CameraIntrinsics& camera, double gamma_p) {
  PhotometricBlock block;
  if (!(host.idepth > 0.0)) return block;
  const Pose target_from_host = state.pose() * host.base_from_host;
  const double ratio = brightness_ratio(state.affine, host.affine);
  const auto& pattern = residual_pattern();
  for (int k = 0; k < kPatternSize; ++k) {
    const WarpOutcome w =
        try_warp(camera, target_from_host, host.p + pattern[static_cast<std::size_t>(k)], host.idepth);
    if (!w.ok()) return PhotometricBlock{};
    const PixelSample s = sample_with_interpolant_gradient(cur, w.point.p);
    const double host_term = host.intensities[k] - host.affine.b;
    block.r[k] = (s.intensity - state.affine.b) - ratio * host_term;
    const Eigen::RowVector2d grad(s.grad_u, s.grad_v);
    block.J.block<1, 6>(k, 0) = grad * projection_jacobian(camera, w.camera_point);
    block.J(k, 6) = -ratio * host_term;
    block.J(k, 7) = -1.0;
  }
  block.energy = block.r.squaredNorm();
  block.w = photometric_block_weight(block.energy, gamma_p);
  block.valid = true;
  return block;
}

GeometricBlock geometric_residual(const Vector2& p, double idepth, const Pose& base_from_host, const Vector2& obs,
                                  const FrameState& state, const CameraIntrinsics& camera, double w_d,
                                  double gamma_g) {
  GeometricBlock block;
  const WarpOutcome w = try_warp(camera, state.pose() * base_from_host, p, idepth, 0.0);
  if (!w.ok()) return block;
  block.r = w.point.p - obs;
  block.J.leftCols<6>() = projection_jacobian(camera, w.camera_point);
  block.w_d = w_d;
  block.w = w_d * huber_weight(block.r.squaredNorm(), gamma_g);
  block.valid = true;
  return block;
}

double mad_variance(std::vector<double>& values, double floor) {
  if (values.empty()) return floor;
  const double med = median_inplace(values);
  for (double& v : values) v = std::abs(v - med);
  const double mad = median_inplace(values);
  return std::max(floor, (kMadScale * mad) * (kMadScale * mad));
}

std::pair<double, double> estimate_variances(const ResidualSystem& system, double floor) {
  std::vector<double> rows_p;
  std::vector<double> rows_g;
  for (const PhotometricBlock& b : system.photometric) {
    if (!b.valid) continue;
    for (int k = 0; k < kPatternSize; ++k) rows_p.push_back(b.r[k]);
  }
  for (const GeometricBlock& b : system.geometric) {
    if (!b.valid) continue;
    rows_g.push_back(b.r.x());
    rows_g.push_back(b.r.y());
  }
  if (rows_p.empty() && rows_g.empty()) throw Error(ErrorCode::kEmptySystem, "no valid residual blocks");
  return {mad_variance(rows_p, floor), mad_variance(rows_g, floor)};
}

}  // namespace jointvo
