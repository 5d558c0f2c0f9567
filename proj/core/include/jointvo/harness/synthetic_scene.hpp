#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "jointvo/geometry.hpp"
#include "jointvo/image_pyramid.hpp"

namespace jointvo {

enum class TextureKind {
  /// Value noise plus soft-edged rectangles: plenty of corners and gradients.
  kRich,
  /// Warped sinusoidal stripes faded to a flat border: gradients without corners.
  kSmooth,
};

struct TextureSpec {
  TextureKind kind = TextureKind::kRich;
  std::uint64_t seed = 0;
};

/// Rasterized procedural texture over a plane's (u, v) extent with box-filtered mip levels.
class TextureRaster {
 public:
  TextureRaster(const TextureSpec& spec, double extent_u, double extent_v, double texel_size);

  /// Bilinear sample of the finest level.
  double sample(double u, double v) const { return sample_level(0, u, v); }
  /// Trilinear sample prefiltered for a sampling interval of `footprint` plane units.
  double sample(double u, double v, double footprint) const;
  double texel_size() const { return texel_; }
  int num_levels() const { return static_cast<int>(levels_.size()); }

 private:
  struct Level {
    int cols = 0;
    int rows = 0;
    double texel = 1.0;
    std::vector<float> values;
  };

  double sample_level(int level, double u, double v) const;

  double texel_ = 1.0;
  std::vector<Level> levels_;
};

/// Procedural radiance at plane coordinates (u, v) before rasterization.
double texture_value(const TextureSpec& spec, double u, double v, double extent_u, double extent_v);

/// Bounded textured rectangle origin + s axis_u + r axis_v, 0 <= s <= extent_u, 0 <= r <= extent_v.
struct TexturedPlane {
  Vector3 origin = Vector3::Zero();
  Vector3 axis_u = Vector3::UnitX();
  Vector3 axis_v = Vector3::UnitY();
  double extent_u = 1.0;
  double extent_v = 1.0;
  TextureSpec texture;
  std::shared_ptr<const TextureRaster> raster;

  Vector3 normal() const { return axis_u.cross(axis_v); }
  /// Plane equation normal() . x = offset().
  double offset() const { return normal().dot(origin); }
};

/// Builds a plane and rasterizes its texture. The axes must be orthonormal.
TexturedPlane make_plane(const Vector3& origin, const Vector3& axis_u, const Vector3& axis_v, double extent_u,
                         double extent_v, const TextureSpec& texture, double texel_size);

struct SceneFrame {
  double timestamp = 0.0;
  /// World-to-camera.
  Pose pose;
  /// Rendering model I = t e^a R + b.
  AffineBrightness affine;
};

struct SyntheticScene {
  std::vector<TexturedPlane> surfaces;
  std::vector<SceneFrame> frames;
  CameraIntrinsics intrinsics;
  double noise = 0.0;
  std::uint64_t noise_seed = 0;
  int num_levels = 4;
};

enum class SceneKind { kOrbit, kLowTexture };

struct SceneOptions {
  SceneKind kind = SceneKind::kOrbit;
  /// Length of the underlying trajectory; every `subsample`-th pose is emitted.
  int frames = 200;
  int subsample = 1;
  std::uint64_t seed = 7;
  double noise = 2.0;
  int width = 640;
  int height = 480;
  double focal = 400.0;
  double orbit_radius = 2.5;
  double orbit_degrees = 30.0;
  double bob = 0.1;
  /// Per-frame Gaussian jitter of the camera center, scene units.
  double shake = 0.0;
  double fps = 30.0;
  double exposure_amplitude = 0.1;
  double gain_amplitude = 0.05;
  double offset_amplitude = 2.0;
  double texel_size = 0.005;
  int num_levels = 4;
};

/// A closed room orbited by a camera looking at a fixed target.
SyntheticScene make_scene(const SceneOptions& options);

/// Sets one `key = value` option (kind, frames, subsample, seed, noise, width, ...).
/// Throws kInvalidConfig for unknown keys or bad values.
void set_scene_option(SceneOptions& options, std::string_view key, std::string_view value);

/// Reads `key = value` lines; `#` comments and bracketed headers are ignored.
SceneOptions load_scene_options(const std::filesystem::path& path);

struct RayHit {
  /// Inverse of the camera z coordinate of the hit.
  double idepth = 0.0;
  Vector3 world = Vector3::Zero();
  std::size_t surface = 0;
};

/// Nearest surface hit by the ray through pixel p of a camera at `pose` (world-to-camera).
std::optional<RayHit> cast_ray(const SyntheticScene& scene, const Pose& pose, const Vector2& p);

struct RenderedFrame {
  ImagePyramidPtr pyramid;
  /// 8-bit quantized intensities as doubles.
  ImagePlane image;
  /// Ground-truth inverse depth at every pixel center; 0 where no surface is hit.
  std::vector<double> idepth;

  double idepth_at(int u, int v) const { return idepth[static_cast<std::size_t>(v) * image.width() + u]; }
};

/// Ray-casts every pixel (2x2 supersampled), applies the brightness schedule, noise and 8-bit
/// quantization. Throws kNoSurfaceInView when no pixel hits a surface.
RenderedFrame render_frame(const SyntheticScene& scene, std::size_t index);

}  // namespace jointvo
