#include "jointvo/harness/synthetic_scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "jointvo/config.hpp"
#include "jointvo/error.hpp"

namespace jointvo {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash(std::uint64_t seed, std::int64_t i, std::int64_t j, std::uint64_t salt) {
  return mix(seed ^ mix(static_cast<std::uint64_t>(i) ^ mix(static_cast<std::uint64_t>(j) ^ mix(salt))));
}

// Uniform in [0, 1) from the top 53 bits.
double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

double value_noise(std::uint64_t seed, std::uint64_t octave, double u, double v, double spacing) {
  const double x = u / spacing;
  const double y = v / spacing;
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const auto i = static_cast<std::int64_t>(fx);
  const auto j = static_cast<std::int64_t>(fy);
  const double sx = smoothstep(x - fx);
  const double sy = smoothstep(y - fy);
  const auto corner = [&](std::int64_t di, std::int64_t dj) { return 2.0 * unit(hash(seed, i + di, j + dj, octave)) - 1.0; };
  const double top = corner(0, 0) + sx * (corner(1, 0) - corner(0, 0));
  const double bottom = corner(0, 1) + sx * (corner(1, 1) - corner(0, 1));
  return top + sy * (bottom - top);
}

// Soft indicator of [lo, hi] with edges blurred over `width`.
double soft_box(double x, double lo, double hi, double width) {
  return smoothstep((x - lo) / width + 0.5) - smoothstep((x - hi) / width + 0.5);
}

double rich_texture(std::uint64_t seed, double u, double v) {
  double value = 120.0 + 30.0 * value_noise(seed, 1, u, v, 0.5) + 18.0 * value_noise(seed, 2, u, v, 0.17) +
                 8.0 * value_noise(seed, 3, u, v, 0.06);
  constexpr double kCell = 0.3;
  const auto ci = static_cast<std::int64_t>(std::floor(u / kCell));
  const auto cj = static_cast<std::int64_t>(std::floor(v / kCell));
  const std::uint64_t h = hash(seed, ci, cj, 100);
  if (unit(h) < 0.8) {
    const double w = 0.06 + 0.14 * unit(mix(h + 1));
    const double hgt = 0.06 + 0.14 * unit(mix(h + 2));
    const double x0 = ci * kCell + (kCell - w) * unit(mix(h + 3));
    const double y0 = cj * kCell + (kCell - hgt) * unit(mix(h + 4));
    const double magnitude = 35.0 + 35.0 * unit(mix(h + 5));
    const double sign = unit(mix(h + 6)) < 0.5 ? -1.0 : 1.0;
    constexpr double kEdge = 0.006;
    value += sign * magnitude * soft_box(u, x0, x0 + w, kEdge) * soft_box(v, y0, y0 + hgt, kEdge);
  }
  return std::clamp(value, 20.0, 220.0);
}

// Warped stripes have ridges along curves rather than isolated extrema, so the segment test
// never sees a contiguous 9-pixel arc. The fade removes intensity steps at plane seams.
double smooth_texture(std::uint64_t seed, double u, double v, double extent_u, double extent_v) {
  const double angle = std::numbers::pi * unit(mix(seed + 11));
  const double phase = kTwoPi * unit(mix(seed + 12));
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double along = c * u + s * v;
  const double across = -s * u + c * v;
  constexpr double kWavelength = 0.25;
  constexpr double kWarpWavelength = 0.7;
  constexpr double kWarp = 1.5;
  constexpr double kAmplitude = 15.0;
  constexpr double kFade = 0.2;
  const double fade = smoothstep(std::min({u, v, extent_u - u, extent_v - v}) / kFade);
  const double psi = kTwoPi * along / kWavelength + kWarp * std::sin(kTwoPi * across / kWarpWavelength) + phase;
  return 128.0 + kAmplitude * fade * std::sin(psi);
}

Pose look_at(const Vector3& center, const Vector3& target) {
  const Vector3 z = (target - center).normalized();
  const Vector3 x = Vector3::UnitY().cross(z).normalized();
  const Vector3 y = z.cross(x);
  Matrix3 camera_to_world;
  camera_to_world << x, y, z;
  const Matrix3 r = camera_to_world.transpose();
  return Pose(r, -(r * center));
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  const std::string text(value);
  std::size_t used = 0;
  T out{};
  try {
    if constexpr (std::is_same_v<T, double>) {
      out = std::stod(text, &used);
    } else if constexpr (std::is_same_v<T, int>) {
      out = std::stoi(text, &used);
    } else {
      out = static_cast<T>(std::stoull(text, &used));
    }
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) {
    throw Error(ErrorCode::kInvalidConfig, "bad value '" + text + "' for scene option " + std::string(key));
  }
  return out;
}

}  // namespace

double texture_value(const TextureSpec& spec, double u, double v, double extent_u, double extent_v) {
  return spec.kind == TextureKind::kRich ? rich_texture(spec.seed, u, v)
                                         : smooth_texture(spec.seed, u, v, extent_u, extent_v);
}

TextureRaster::TextureRaster(const TextureSpec& spec, double extent_u, double extent_v, double texel_size)
    : texel_(texel_size) {
  if (!(texel_size > 0.0) || !(extent_u > 0.0) || !(extent_v > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "texture raster needs positive extents and texel size");
  }
  Level base;
  base.cols = static_cast<int>(std::ceil(extent_u / texel_)) + 1;
  base.rows = static_cast<int>(std::ceil(extent_v / texel_)) + 1;
  base.texel = texel_;
  base.values.resize(static_cast<std::size_t>(base.cols) * base.rows);
  for (int j = 0; j < base.rows; ++j) {
    for (int i = 0; i < base.cols; ++i) {
      base.values[static_cast<std::size_t>(j) * base.cols + i] =
          static_cast<float>(texture_value(spec, i * texel_, j * texel_, extent_u, extent_v));
    }
  }
  levels_.push_back(std::move(base));
  // Each level halves the resolution with a [1 2 1] x [1 2 1] filter centered on every other
  // texel, so texel j of level l+1 sits at texel 2j of level l.
  while (levels_.back().cols >= 5 && levels_.back().rows >= 5) {
    const Level& fine = levels_.back();
    Level coarse;
    coarse.cols = (fine.cols - 1) / 2 + 1;
    coarse.rows = (fine.rows - 1) / 2 + 1;
    coarse.texel = 2.0 * fine.texel;
    coarse.values.resize(static_cast<std::size_t>(coarse.cols) * coarse.rows);
    const auto at = [&](int i, int j) {
      i = std::clamp(i, 0, fine.cols - 1);
      j = std::clamp(j, 0, fine.rows - 1);
      return static_cast<double>(fine.values[static_cast<std::size_t>(j) * fine.cols + i]);
    };
    for (int j = 0; j < coarse.rows; ++j) {
      for (int i = 0; i < coarse.cols; ++i) {
        double sum = 0.0;
        for (int dj = -1; dj <= 1; ++dj) {
          for (int di = -1; di <= 1; ++di) sum += (2 - std::abs(di)) * (2 - std::abs(dj)) * at(2 * i + di, 2 * j + dj);
        }
        coarse.values[static_cast<std::size_t>(j) * coarse.cols + i] = static_cast<float>(sum / 16.0);
      }
    }
    levels_.push_back(std::move(coarse));
  }
}

double TextureRaster::sample_level(int level, double u, double v) const {
  const Level& l = levels_[static_cast<std::size_t>(level)];
  const double x = std::clamp(u / l.texel, 0.0, l.cols - 1.0);
  const double y = std::clamp(v / l.texel, 0.0, l.rows - 1.0);
  const int i = std::min(static_cast<int>(x), l.cols - 2);
  const int j = std::min(static_cast<int>(y), l.rows - 2);
  const double fx = x - i;
  const double fy = y - j;
  const float* row = l.values.data() + static_cast<std::size_t>(j) * l.cols + i;
  const double top = row[0] + fx * (row[1] - row[0]);
  const double bottom = row[l.cols] + fx * (row[l.cols + 1] - row[l.cols]);
  return top + fy * (bottom - top);
}

double TextureRaster::sample(double u, double v, double footprint) const {
  const double lod = std::log2(std::max(footprint / texel_, 1.0));
  const int top = num_levels() - 1;
  if (lod >= top) return sample_level(top, u, v);
  const int l = static_cast<int>(lod);
  const double f = lod - l;
  const double fine = sample_level(l, u, v);
  return f > 0.0 ? fine + f * (sample_level(l + 1, u, v) - fine) : fine;
}

TexturedPlane make_plane(const Vector3& origin, const Vector3& axis_u, const Vector3& axis_v, double extent_u,
                         double extent_v, const TextureSpec& texture, double texel_size) {
  TexturedPlane plane;
  plane.origin = origin;
  plane.axis_u = axis_u;
  plane.axis_v = axis_v;
  plane.extent_u = extent_u;
  plane.extent_v = extent_v;
  plane.texture = texture;
  plane.raster = std::make_shared<const TextureRaster>(texture, extent_u, extent_v, texel_size);
  return plane;
}

SyntheticScene make_scene(const SceneOptions& o) {
  if (o.frames < 1 || o.subsample < 1) throw Error(ErrorCode::kInvalidConfig, "scene needs frames >= 1 and subsample >= 1");
  SyntheticScene scene;
  scene.intrinsics = {o.focal, o.focal, 0.5 * (o.width - 1), 0.5 * (o.height - 1), o.width, o.height};
  scene.intrinsics.validate();
  scene.noise = o.noise;
  scene.noise_seed = mix(o.seed ^ 0xA5A5A5A5ULL);
  scene.num_levels = o.num_levels;

  const TextureKind kind = o.kind == SceneKind::kOrbit ? TextureKind::kRich : TextureKind::kSmooth;
  const auto spec = [&](std::uint64_t i) { return TextureSpec{kind, mix(o.seed * 31 + i)}; };
  const Vector3 ex = Vector3::UnitX();
  const Vector3 ey = Vector3::UnitY();
  const Vector3 ez = Vector3::UnitZ();
  // Image y points down, so the floor sits at positive y.
  constexpr double kLeft = -3.0, kRight = 3.0, kTop = -1.5, kFloor = 1.0, kFront = -2.0, kBack = 4.5;
  const double w = kRight - kLeft, h = kFloor - kTop, d = kBack - kFront;
  const double texel = o.texel_size;
  scene.surfaces.push_back(make_plane({kLeft, kTop, kBack}, ex, ey, w, h, spec(0), texel));
  scene.surfaces.push_back(make_plane({kRight, kTop, kFront}, -ex, ey, w, h, spec(1), texel));
  scene.surfaces.push_back(make_plane({kLeft, kTop, kFront}, ez, ey, d, h, spec(2), texel));
  scene.surfaces.push_back(make_plane({kRight, kTop, kBack}, -ez, ey, d, h, spec(3), texel));
  scene.surfaces.push_back(make_plane({kLeft, kFloor, kFront}, ex, ez, w, d, spec(4), texel));
  scene.surfaces.push_back(make_plane({kLeft, kTop, kFront}, ex, ez, w, d, spec(5), texel));

  const Vector3 target(0.0, 0.0, o.orbit_radius);
  const double amplitude = o.orbit_degrees * std::numbers::pi / 180.0;
  std::mt19937_64 rng(mix(o.seed ^ 0x5EEDULL));
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (int s = 0; s < o.frames; ++s) {
    const double phase = kTwoPi * s / o.frames;
    const double theta = amplitude * std::sin(phase);
    Vector3 center = target + Eigen::AngleAxisd(theta, ey) * Vector3(0.0, 0.0, -o.orbit_radius);
    center.y() += o.bob * std::sin(2.0 * phase);
    if (o.shake > 0.0) center += o.shake * Vector3(jitter(rng), jitter(rng), jitter(rng));
    if (s % o.subsample != 0) continue;

    SceneFrame frame;
    frame.timestamp = s / o.fps;
    frame.pose = look_at(center, target);
    frame.affine.t = 1.0 + o.exposure_amplitude * std::sin(kTwoPi * s / 50.0);
    frame.affine.a = o.gain_amplitude * std::sin(kTwoPi * s / 80.0 + 1.0);
    frame.affine.b = o.offset_amplitude * std::sin(kTwoPi * s / 65.0 + 2.0);
    scene.frames.push_back(frame);
  }
  return scene;
}

void set_scene_option(SceneOptions& o, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key == "kind") {
    if (value == "orbit") {
      o.kind = SceneKind::kOrbit;
    } else if (value == "low_texture") {
      o.kind = SceneKind::kLowTexture;
    } else {
      throw Error(ErrorCode::kInvalidConfig, "scene kind must be orbit or low_texture, got '" + std::string(value) + "'");
    }
  } else if (key == "frames") {
    o.frames = parse_number<int>(key, value);
  } else if (key == "subsample") {
    o.subsample = parse_number<int>(key, value);
  } else if (key == "seed") {
    o.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "noise") {
    o.noise = parse_number<double>(key, value);
  } else if (key == "width") {
    o.width = parse_number<int>(key, value);
  } else if (key == "height") {
    o.height = parse_number<int>(key, value);
  } else if (key == "focal") {
    o.focal = parse_number<double>(key, value);
  } else if (key == "orbit_radius") {
    o.orbit_radius = parse_number<double>(key, value);
  } else if (key == "orbit_degrees") {
    o.orbit_degrees = parse_number<double>(key, value);
  } else if (key == "bob") {
    o.bob = parse_number<double>(key, value);
  } else if (key == "shake") {
    o.shake = parse_number<double>(key, value);
  } else if (key == "fps") {
    o.fps = parse_number<double>(key, value);
  } else if (key == "exposure_amplitude") {
    o.exposure_amplitude = parse_number<double>(key, value);
  } else if (key == "gain_amplitude") {
    o.gain_amplitude = parse_number<double>(key, value);
  } else if (key == "offset_amplitude") {
    o.offset_amplitude = parse_number<double>(key, value);
  } else if (key == "texel_size") {
    o.texel_size = parse_number<double>(key, value);
  } else if (key == "num_levels") {
    o.num_levels = parse_number<int>(key, value);
  } else {
    throw Error(ErrorCode::kInvalidConfig, "unknown scene option '" + std::string(key) + "'");
  }
}

SceneOptions load_scene_options(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidConfig, "cannot open scene file " + path.string());
  SceneOptions options;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (const auto hash_pos = view.find('#'); hash_pos != std::string_view::npos) view = view.substr(0, hash_pos);
    view = trim(view);
    if (view.empty() || view.front() == '[') continue;
    try {
      auto [key, value] = split_assignment(view);
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      set_scene_option(options, key, value);
    } catch (const Error& e) {
      throw Error(ErrorCode::kInvalidConfig, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return options;
}

std::optional<RayHit> cast_ray(const SyntheticScene& scene, const Pose& pose, const Vector2& p) {
  const CameraIntrinsics& k = scene.intrinsics;
  const Vector3 bearing((p.x() - k.cu) / k.fu, (p.y() - k.cv) / k.fv, 1.0);
  const Matrix3 rt = pose.rotation().transpose();
  const Vector3 origin = pose.center();
  const Vector3 dir = rt * bearing;
  std::optional<RayHit> best;
  double best_z = std::numeric_limits<double>::infinity();
  constexpr double kSlack = 1e-9;
  for (std::size_t i = 0; i < scene.surfaces.size(); ++i) {
    const TexturedPlane& s = scene.surfaces[i];
    const Vector3 n = s.normal();
    const double denom = n.dot(dir);
    if (std::abs(denom) < 1e-12) continue;
    // dir has unit camera-z, so the ray parameter is the camera depth.
    const double z = (s.offset() - n.dot(origin)) / denom;
    if (z <= kDefaultMinDepth || z >= best_z) continue;
    const Vector3 x = origin + z * dir;
    const double su = (x - s.origin).dot(s.axis_u);
    const double sv = (x - s.origin).dot(s.axis_v);
    if (su < -kSlack || sv < -kSlack || su > s.extent_u + kSlack || sv > s.extent_v + kSlack) continue;
    best_z = z;
    best = RayHit{1.0 / z, x, i};
  }
  return best;
}

RenderedFrame render_frame(const SyntheticScene& scene, std::size_t index) {
  if (index >= scene.frames.size()) {
    throw Error(ErrorCode::kInvalidConfig, "frame index " + std::to_string(index) + " outside the trajectory");
  }
  const SceneFrame& frame = scene.frames[index];
  const CameraIntrinsics& k = scene.intrinsics;
  const int w = k.width;
  const int h = k.height;
  const double gain = frame.affine.t * std::exp(frame.affine.a);
  const double focal = std::sqrt(k.fu * k.fv);

  // Per-surface constants of the ray test, hoisted out of the pixel loop.
  struct Caster {
    Vector3 n;
    double distance;
    Vector3 origin;
    Vector3 axis_u;
    Vector3 axis_v;
    double extent_u;
    double extent_v;
    const TextureRaster* raster;
  };
  const Vector3 eye = frame.pose.center();
  const Matrix3 rt = frame.pose.rotation().transpose();
  std::vector<Caster> casters;
  for (const TexturedPlane& s : scene.surfaces) {
    const Vector3 n = s.normal();
    casters.push_back({n, s.offset() - n.dot(eye), s.origin, s.axis_u, s.axis_v, s.extent_u, s.extent_v,
                       s.raster.get()});
  }
  // Returns the camera depth of the nearest hit (0 if none) and, when asked, its radiance.
  const auto trace = [&](double u, double v, double* radiance) {
    const Vector3 dir = rt * Vector3((u - k.cu) / k.fu, (v - k.cv) / k.fv, 1.0);
    double best = std::numeric_limits<double>::infinity();
    const Caster* hit = nullptr;
    double hit_u = 0.0, hit_v = 0.0;
    for (const Caster& c : casters) {
      const double denom = c.n.dot(dir);
      if (std::abs(denom) < 1e-12) continue;
      const double z = c.distance / denom;
      if (z <= kDefaultMinDepth || z >= best) continue;
      const Vector3 rel = eye + z * dir - c.origin;
      const double su = rel.dot(c.axis_u);
      const double sv = rel.dot(c.axis_v);
      if (su < -1e-9 || sv < -1e-9 || su > c.extent_u + 1e-9 || sv > c.extent_v + 1e-9) continue;
      best = z;
      hit = &c;
      hit_u = su;
      hit_v = sv;
    }
    if (!hit || !radiance) return hit ? best : 0.0;
    // Half a pixel (the supersample spacing) stretched by the incidence angle, in plane units.
    const double cosine = std::abs(hit->n.dot(dir)) / dir.norm();
    const double footprint = 0.5 * best * dir.squaredNorm() / (focal * std::max(cosine, 0.05));
    *radiance = hit->raster->sample(hit_u, hit_v, footprint);
    return best;
  };

  std::mt19937_64 rng(mix(scene.noise_seed + 0x9E3779B97F4A7C15ULL * (index + 1)));
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<double> pixels(static_cast<std::size_t>(w) * h, 0.0);
  std::vector<double> idepth(pixels.size(), 0.0);
  bool any_hit = false;
  constexpr double kOffsets[2] = {-0.25, 0.25};
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const std::size_t i = static_cast<std::size_t>(v) * w + u;
      if (const double z = trace(u, v, nullptr); z > 0.0) idepth[i] = 1.0 / z;
      double radiance = 0.0;
      int hits = 0;
      for (const double dv : kOffsets) {
        for (const double du : kOffsets) {
          double r = 0.0;
          if (trace(u + du, v + dv, &r) > 0.0) {
            radiance += r;
            ++hits;
          }
        }
      }
      any_hit = any_hit || hits > 0;
      const double r = hits > 0 ? radiance / hits : 0.0;
      const double value = gain * r + frame.affine.b + scene.noise * noise(rng);
      pixels[i] = std::clamp(std::round(value), 0.0, 255.0);
    }
  }
  if (!any_hit) throw Error(ErrorCode::kNoSurfaceInView, "frame " + std::to_string(index) + " sees no surface");

  RenderedFrame out;
  out.image = ImagePlane(w, h, std::move(pixels));
  const int levels = std::min(scene.num_levels, max_pyramid_levels(w, h));
  out.pyramid = std::make_shared<const ImagePyramid>(build_pyramid(out.image, k, frame.affine.t, levels));
  out.idepth = std::move(idepth);
  return out;
}

}  // namespace jointvo
