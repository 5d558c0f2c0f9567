#pragma once

#include <memory>
#include <span>
#include <vector>

#include "jointvo/geometry.hpp"

namespace jointvo {

/// Row-major intensity grid with per-pixel directional gradients.
class ImagePlane {
 public:
  ImagePlane() = default;

  /// Takes ownership of a width*height intensity grid and computes gradients.
  ImagePlane(int width, int height, std::vector<double> intensities);

  int width() const { return width_; }
  int height() const { return height_; }

  double intensity(int u, int v) const { return intensities_[index(u, v)]; }
  double grad_u(int u, int v) const { return grad_u_[index(u, v)]; }
  double grad_v(int u, int v) const { return grad_v_[index(u, v)]; }

  std::span<const double> intensities() const { return intensities_; }
  std::span<const double> grad_u() const { return grad_u_; }
  std::span<const double> grad_v() const { return grad_v_; }

  bool inside(const Vector2& p, double border) const {
    return p.x() >= border && p.y() >= border && p.x() <= width_ - 1 - border &&
           p.y() <= height_ - 1 - border;
  }

 private:
  std::size_t index(int u, int v) const { return static_cast<std::size_t>(v) * width_ + u; }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> intensities_;
  std::vector<double> grad_u_;
  std::vector<double> grad_v_;
};

struct PixelSample {
  double intensity = 0.0;
  double grad_u = 0.0;
  double grad_v = 0.0;
};

/// Bilinear sample of intensity and both gradient planes. Throws kOutOfImage outside the
/// 1-px border.
PixelSample sample_bilinear(const ImagePlane& plane, const Vector2& p);

/// Same as sample_bilinear without the bounds check; caller guarantees 0 <= p <= size-1.
PixelSample sample_bilinear_unchecked(const ImagePlane& plane, const Vector2& p);

/// Bilinear intensity only, unchecked.
double sample_intensity_unchecked(const ImagePlane& plane, const Vector2& p);

class ImagePyramid {
 public:
  ImagePyramid() = default;
  ImagePyramid(std::vector<ImagePlane> levels, std::vector<CameraIntrinsics> intrinsics, double exposure);

  int num_levels() const { return static_cast<int>(levels_.size()); }
  const ImagePlane& level(int l) const { return levels_.at(static_cast<std::size_t>(l)); }
  const CameraIntrinsics& intrinsics(int l) const { return intrinsics_.at(static_cast<std::size_t>(l)); }
  double exposure() const { return exposure_; }

 private:
  std::vector<ImagePlane> levels_;
  std::vector<CameraIntrinsics> intrinsics_;
  double exposure_ = 1.0;
};

inline constexpr int kMinImageSize = 64;
inline constexpr int kMinCoarsestSize = 32;

/// Largest level count that keeps the coarsest level at least 32 px on the short side.
int max_pyramid_levels(int width, int height);

/// 2x2 block-mean pyramid. Throws kImageTooSmall for images under 64x64 or when num_levels
/// would shrink the coarsest level below 32 px (or is less than 2).
ImagePyramid build_pyramid(const ImagePlane& image, const CameraIntrinsics& camera, double exposure,
                           int num_levels);

using ImagePyramidPtr = std::shared_ptr<const ImagePyramid>;

}  // namespace jointvo
