#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jointvo/geometry.hpp"
#include "jointvo/harness/synthetic_scene.hpp"
#include "jointvo/harness/trajectory_metrics.hpp"
#include "jointvo/image_pyramid.hpp"

namespace jointvo {

struct SourceFrame {
  std::size_t index = 0;
  double timestamp = 0.0;
  /// Exposure time; 1 when the source does not provide one.
  double exposure = 1.0;
  /// Photometrically corrected intensities.
  ImagePlane image;
};

/// Ordered stream of frames consumed by run_odometry.
class FrameSource {
 public:
  virtual ~FrameSource() = default;

  virtual std::size_t size() const = 0;
  virtual CameraIntrinsics intrinsics() const = 0;
  virtual SourceFrame frame(std::size_t index) const = 0;

  /// Camera-to-world ground truth, empty when unknown.
  virtual std::vector<TrajectoryEntry> ground_truth() const { return {}; }

  /// Ground-truth inverse depth at pixel p of a frame, when the source knows it.
  virtual std::optional<double> true_idepth(std::size_t /*frame*/, const Vector2& /*p*/) const { return std::nullopt; }
};

/// Renders frames of a synthetic scene on demand.
class SyntheticSource : public FrameSource {
 public:
  explicit SyntheticSource(SyntheticScene scene) : scene_(std::move(scene)) {}

  std::size_t size() const override { return scene_.frames.size(); }
  CameraIntrinsics intrinsics() const override { return scene_.intrinsics; }
  SourceFrame frame(std::size_t index) const override;
  std::vector<TrajectoryEntry> ground_truth() const override;
  std::optional<double> true_idepth(std::size_t frame, const Vector2& p) const override;

  const SyntheticScene& scene() const { return scene_; }

 private:
  SyntheticScene scene_;
};

/// Directory layout:
///   camera.txt        fu fv cu cv width height
///   times.txt         index timestamp [exposure]
///   images/%06d.pgm   8-bit or 16-bit binary PGM
///   pcalib.txt        optional, 256 values mapping pixel value to irradiance
///   vignette.pgm      optional, attenuation normalized by its maximum
///   groundtruth.txt   optional trajectory
///   init_idepth.bin   optional, width*height little-endian doubles for frame 0 (0 = unknown)
/// Every ingestion error is kMalformedDataset naming the offending file.
class DatasetSource : public FrameSource {
 public:
  explicit DatasetSource(const std::filesystem::path& root);

  std::size_t size() const override { return entries_.size(); }
  CameraIntrinsics intrinsics() const override { return camera_; }
  SourceFrame frame(std::size_t index) const override;
  std::vector<TrajectoryEntry> ground_truth() const override { return ground_truth_; }
  std::optional<double> true_idepth(std::size_t frame, const Vector2& p) const override;

  bool has_exposure() const { return has_exposure_; }
  bool has_response() const { return response_.has_value(); }
  bool has_vignette() const { return !vignette_.empty(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  struct Entry {
    int id = 0;
    double timestamp = 0.0;
    double exposure = 1.0;
  };

  std::filesystem::path root_;
  CameraIntrinsics camera_;
  std::vector<Entry> entries_;
  bool has_exposure_ = true;
  std::optional<std::array<double, 256>> response_;
  std::vector<double> vignette_;
  std::vector<TrajectoryEntry> ground_truth_;
  std::vector<double> init_idepth_;
  std::vector<std::string> warnings_;
};

struct Pgm {
  int width = 0;
  int height = 0;
  int max_value = 255;
  std::vector<int> pixels;
};

/// Binary (P5) PGM with 8- or 16-bit samples. Throws kMalformedDataset.
Pgm read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Pgm& image);

/// Writes a rendered synthetic sequence in the directory layout above, with ground truth and
/// the first frame's inverse depth.
void export_dataset(const SyntheticScene& scene, const std::filesystem::path& root);

}  // namespace jointvo
