#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "jointvo/config.hpp"
#include "jointvo/geometry.hpp"
#include "jointvo/image_pyramid.hpp"

namespace jointvo {

using FeatureId = std::uint64_t;
using KeyframeId = std::int64_t;
inline constexpr KeyframeId kNoKeyframe = -1;

enum class FeatureKind { kCorner, kPixel };
enum class FeatureStatus { kCandidate, kActive, kMarginalized, kOutlier };

const char* to_string(FeatureKind kind);
const char* to_string(FeatureStatus status);

/// Candidate->Active, Candidate->Outlier, Active->Marginalized, Active->Outlier.
bool is_legal_transition(FeatureStatus from, FeatureStatus to);

/// 256-bit binary descriptor.
using Descriptor = std::array<std::uint64_t, 4>;

int hamming(const Descriptor& a, const Descriptor& b);

/// Offsets of the residual pattern, center first.
inline constexpr int kPatternSize = 8;
const std::array<Vector2, kPatternSize>& residual_pattern();

struct PatchSample {
  Vector2 offset;
  double intensity = 0.0;
};

/// Intensities of the residual pattern around p on a level-0 plane. Throws kOutOfImage.
std::vector<PatchSample> extract_patch(const ImagePlane& plane, const Vector2& p);

/// Corner or pixel point hosted in a keyframe, parametrized by inverse depth.
class Feature {
 public:
  Feature() = default;
  Feature(FeatureKind kind, const Vector2& p) : kind(kind), p(p) {}

  FeatureStatus status() const { return status_; }

  /// Throws kIllegalTransition for moves outside the status machine. Same-state calls are no-ops.
  void transition_to(FeatureStatus next);

  bool is_corner() const { return kind == FeatureKind::kCorner; }

  FeatureId id = 0;
  FeatureKind kind = FeatureKind::kPixel;
  KeyframeId host_keyframe = kNoKeyframe;
  Vector2 p = Vector2::Zero();
  double idepth = 1.0;
  double idepth_variance = 1.0;
  int num_observations = 0;
  std::vector<PatchSample> patch;
  std::optional<double> score;
  std::optional<Descriptor> descriptor;
  int match_failures = 0;

 private:
  FeatureStatus status_ = FeatureStatus::kCandidate;
};

/// Coarse boolean grid over a keyframe image; every point claims the 3x3 cell block around it.
class OccupancyGrid {
 public:
  OccupancyGrid() = default;
  OccupancyGrid(int image_width, int image_height, int cell_size);

  int cols() const { return cols_; }
  int rows() const { return rows_; }
  int cell_size() const { return cell_size_; }
  int image_width() const { return image_width_; }
  int image_height() const { return image_height_; }

  /// Cell containing p, or nullopt outside the image.
  std::optional<std::array<int, 2>> cell_of(const Vector2& p) const;

  bool occupied(int cx, int cy) const { return cells_[index(cx, cy)] != 0; }

  /// True when p lies in the image and no cell of its 3x3 block is occupied.
  bool block_free(const Vector2& p) const;

  /// Marks the 3x3 block around p's cell; points outside the image are ignored.
  void mark_block(const Vector2& p);

  void clear();
  int occupied_count() const;

  /// Chebyshev distance (in cells) from every cell to the nearest occupied cell.
  std::vector<int> distance_to_occupied() const;

 private:
  std::size_t index(int cx, int cy) const { return static_cast<std::size_t>(cy) * cols_ + cx; }

  int image_width_ = 0;
  int image_height_ = 0;
  int cell_size_ = 1;
  int cols_ = 0;
  int rows_ = 0;
  std::vector<std::uint8_t> cells_;
};

/// Descriptor match of a map corner in a new frame.
struct Match {
  FeatureId feature = 0;
  std::size_t map_index = 0;
  std::size_t frame_index = 0;
  Vector2 obs = Vector2::Zero();
  int hamming = 0;
};

/// FAST-9 on level 0, Shi-Tomasi scoring, 3 px non-max suppression, descriptors attached.
std::vector<Feature> detect_corners(const ImagePyramid& pyramid, const FeatureConfig& config);

/// Minimum eigenvalue of the 7x7 structure tensor at the pixel nearest p. Throws kOutOfImage.
double shi_tomasi_score(const ImagePlane& plane, const Vector2& p);

/// Segment test: 9 contiguous pixels of the radius-3 circle brighter or darker by threshold.
bool fast9_test(const ImagePlane& plane, int u, int v, double threshold);

/// Oriented binary-test descriptor over a 31x31 patch. Throws kOutOfImage.
Descriptor compute_descriptor(const ImagePlane& plane, const Vector2& p);

/// Intensity-centroid orientation in radians over a radius-15 disc.
double patch_orientation(const ImagePlane& plane, const Vector2& p);

/// Pixels a corner must keep from the border to be described.
inline constexpr int kDescriptorBorder = 16;

/// A map corner prepared for matching: its host-to-reference transform.
struct MatchQuery {
  const Feature* feature = nullptr;
  Pose ref_from_host;
};

struct MatchResult {
  std::vector<Match> matches;
  /// Queries whose prediction fell inside the image but found no acceptable match.
  std::vector<FeatureId> unmatched_visible;
};

/// Predicts each map corner through `prior`, searches frame corners within `window` pixels,
/// applies the Hamming threshold, the ratio test and one-to-one assignment.
MatchResult match_corners(std::span<const MatchQuery> map, const CameraIntrinsics& camera,
                          std::span<const Feature> frame_corners, const FrameState& prior, double window,
                          const FeatureConfig& config);

/// Gradient-magnitude pixel sampling in free grid cells, away from detected corners.
std::vector<Feature> sample_pixel_candidates(const ImagePyramid& pyramid, OccupancyGrid& grid,
                                             std::span<const Feature> corners, int budget,
                                             const FeatureConfig& config);

/// A candidate expressed in the newest keyframe's image.
struct ProjectedCandidate {
  Feature* feature = nullptr;
  Vector2 p = Vector2::Zero();
};

/// Two-stage activation: strongest corners first, then pixels farthest from occupied cells.
/// Only converged candidates are considered. Returns the activated features.
std::vector<Feature*> activate_features(std::span<const ProjectedCandidate> candidates, OccupancyGrid& grid,
                                        int corner_quota, int pixel_quota, double activation_variance_ratio);

bool depth_converged(const Feature& feature, double activation_variance_ratio);

}  // namespace jointvo
