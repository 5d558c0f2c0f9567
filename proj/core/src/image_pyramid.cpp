#include "jointvo/image_pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "jointvo/error.hpp"

namespace jointvo {

namespace {

// Central differences on the interior, one-sided on the border rows/columns.
void compute_gradients(int width, int height, const std::vector<double>& img, std::vector<double>& gu,
                       std::vector<double>& gv) {
  gu.assign(img.size(), 0.0);
  gv.assign(img.size(), 0.0);
  for (int v = 0; v < height; ++v) {
    const double* row = img.data() + static_cast<std::size_t>(v) * width;
    double* out = gu.data() + static_cast<std::size_t>(v) * width;
    if (width > 1) {
      out[0] = row[1] - row[0];
      out[width - 1] = row[width - 1] - row[width - 2];
    }
    for (int u = 1; u < width - 1; ++u) out[u] = 0.5 * (row[u + 1] - row[u - 1]);
  }
  if (height > 1) {
    for (int u = 0; u < width; ++u) {
      gv[static_cast<std::size_t>(u)] = img[static_cast<std::size_t>(width) + u] - img[static_cast<std::size_t>(u)];
      const std::size_t last = static_cast<std::size_t>(height - 1) * width + u;
      gv[last] = img[last] - img[last - width];
    }
  }
  for (int v = 1; v < height - 1; ++v) {
    const std::size_t base = static_cast<std::size_t>(v) * width;
    for (int u = 0; u < width; ++u) {
      gv[base + u] = 0.5 * (img[base + width + u] - img[base - width + u]);
    }
  }
}

}  // namespace

ImagePlane::ImagePlane(int width, int height, std::vector<double> intensities)
    : width_(width), height_(height), intensities_(std::move(intensities)) {
  if (width <= 0 || height <= 0 || intensities_.size() != static_cast<std::size_t>(width) * height) {
    throw Error(ErrorCode::kInvalidConfig, "intensity grid does not match " + std::to_string(width) + "x" +
                                               std::to_string(height));
  }
  compute_gradients(width_, height_, intensities_, grad_u_, grad_v_);
}

PixelSample sample_bilinear_unchecked(const ImagePlane& plane, const Vector2& p) {
  const int w = plane.width();
  int u0 = static_cast<int>(std::floor(p.x()));
  int v0 = static_cast<int>(std::floor(p.y()));
  u0 = std::clamp(u0, 0, w - 2);
  v0 = std::clamp(v0, 0, plane.height() - 2);
  const double fu = p.x() - u0;
  const double fv = p.y() - v0;
  const double w00 = (1.0 - fu) * (1.0 - fv);
  const double w10 = fu * (1.0 - fv);
  const double w01 = (1.0 - fu) * fv;
  const double w11 = fu * fv;
  const std::size_t i = static_cast<std::size_t>(v0) * w + u0;
  const std::size_t j = i + static_cast<std::size_t>(w);
  const auto blend = [&](std::span<const double> g) {
    return w00 * g[i] + w10 * g[i + 1] + w01 * g[j] + w11 * g[j + 1];
  };
  return {blend(plane.intensities()), blend(plane.grad_u()), blend(plane.grad_v())};
}

double sample_intensity_unchecked(const ImagePlane& plane, const Vector2& p) {
  const int w = plane.width();
  const int u0 = std::clamp(static_cast<int>(std::floor(p.x())), 0, w - 2);
  const int v0 = std::clamp(static_cast<int>(std::floor(p.y())), 0, plane.height() - 2);
  const double fu = p.x() - u0;
  const double fv = p.y() - v0;
  const auto img = plane.intensities();
  const std::size_t i = static_cast<std::size_t>(v0) * w + u0;
  const std::size_t j = i + static_cast<std::size_t>(w);
  return (1.0 - fv) * ((1.0 - fu) * img[i] + fu * img[i + 1]) + fv * ((1.0 - fu) * img[j] + fu * img[j + 1]);
}

PixelSample sample_bilinear(const ImagePlane& plane, const Vector2& p) {
  if (!plane.inside(p, 1.0)) {
    throw Error(ErrorCode::kOutOfImage,
                "sample at (" + std::to_string(p.x()) + ", " + std::to_string(p.y()) + ")");
  }
  return sample_bilinear_unchecked(plane, p);
}

ImagePyramid::ImagePyramid(std::vector<ImagePlane> levels, std::vector<CameraIntrinsics> intrinsics,
                           double exposure)
    : levels_(std::move(levels)), intrinsics_(std::move(intrinsics)), exposure_(exposure) {}

int max_pyramid_levels(int width, int height) {
  int levels = 1;
  int short_side = std::min(width, height);
  while (short_side / 2 >= kMinCoarsestSize) {
    short_side /= 2;
    ++levels;
  }
  return levels;
}

ImagePyramid build_pyramid(const ImagePlane& image, const CameraIntrinsics& camera, double exposure,
                           int num_levels) {
  if (image.width() < kMinImageSize || image.height() < kMinImageSize) {
    throw Error(ErrorCode::kImageTooSmall, std::to_string(image.width()) + "x" + std::to_string(image.height()));
  }
  if (num_levels < 2 || num_levels > max_pyramid_levels(image.width(), image.height())) {
    throw Error(ErrorCode::kImageTooSmall,
                std::to_string(num_levels) + " levels do not fit a " + std::to_string(image.width()) + "x" +
                    std::to_string(image.height()) + " image");
  }
  std::vector<ImagePlane> levels;
  std::vector<CameraIntrinsics> intrinsics;
  levels.reserve(static_cast<std::size_t>(num_levels));
  levels.push_back(image);
  intrinsics.push_back(camera);
  for (int l = 1; l < num_levels; ++l) {
    const ImagePlane& fine = levels.back();
    const int w = fine.width() / 2;
    const int h = fine.height() / 2;
    std::vector<double> coarse(static_cast<std::size_t>(w) * h);
    const auto src = fine.intensities();
    const std::size_t fw = static_cast<std::size_t>(fine.width());
    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        const std::size_t i = 2 * static_cast<std::size_t>(v) * fw + 2 * static_cast<std::size_t>(u);
        coarse[static_cast<std::size_t>(v) * w + u] = 0.25 * (src[i] + src[i + 1] + src[i + fw] + src[i + fw + 1]);
      }
    }
    levels.emplace_back(w, h, std::move(coarse));
    intrinsics.push_back(camera.at_level(l));
  }
  return ImagePyramid(std::move(levels), std::move(intrinsics), exposure);
}

}  // namespace jointvo
