#include "jointvo/features.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <numeric>
#include <string>

#include "jointvo/error.hpp"

namespace jointvo {

const char* to_string(FeatureKind kind) { return kind == FeatureKind::kCorner ? "corner" : "pixel"; }

const char* to_string(FeatureStatus status) {
  switch (status) {
    case FeatureStatus::kCandidate: return "candidate";
    case FeatureStatus::kActive: return "active";
    case FeatureStatus::kMarginalized: return "marginalized";
    case FeatureStatus::kOutlier: return "outlier";
  }
  return "unknown";
}

bool is_legal_transition(FeatureStatus from, FeatureStatus to) {
  switch (from) {
    case FeatureStatus::kCandidate: return to == FeatureStatus::kActive || to == FeatureStatus::kOutlier;
    case FeatureStatus::kActive: return to == FeatureStatus::kMarginalized || to == FeatureStatus::kOutlier;
    case FeatureStatus::kMarginalized:
    case FeatureStatus::kOutlier: return false;
  }
  return false;
}

void Feature::transition_to(FeatureStatus next) {
  if (next == status_) return;
  if (!is_legal_transition(status_, next)) {
    throw Error(ErrorCode::kIllegalTransition, "feature " + std::to_string(id) + ": " + to_string(status_) +
                                                   " -> " + to_string(next));
  }
  status_ = next;
}

const std::array<Vector2, kPatternSize>& residual_pattern() {
  static const std::array<Vector2, kPatternSize> pattern = {
      Vector2(0, 0),  Vector2(0, -2), Vector2(-1, -1), Vector2(1, -1),
      Vector2(-2, 0), Vector2(2, 0),  Vector2(-1, 1),  Vector2(0, 2),
  };
  return pattern;
}

std::vector<PatchSample> extract_patch(const ImagePlane& plane, const Vector2& p) {
  std::vector<PatchSample> patch;
  patch.reserve(kPatternSize);
  for (const Vector2& offset : residual_pattern()) {
    const Vector2 q = p + offset;
    if (!plane.inside(q, 0.0)) {
      throw Error(ErrorCode::kOutOfImage, "residual pattern leaves the image");
    }
    patch.push_back({offset, sample_intensity_unchecked(plane, q)});
  }
  return patch;
}

// ---------------------------------------------------------------------------------------------
// Occupancy grid

OccupancyGrid::OccupancyGrid(int image_width, int image_height, int cell_size)
    : image_width_(image_width),
      image_height_(image_height),
      cell_size_(cell_size),
      cols_((image_width + cell_size - 1) / cell_size),
      rows_((image_height + cell_size - 1) / cell_size),
      cells_(static_cast<std::size_t>(cols_) * rows_, 0) {
  if (cell_size <= 0) throw Error(ErrorCode::kInvalidConfig, "cell_size must be positive");
}

std::optional<std::array<int, 2>> OccupancyGrid::cell_of(const Vector2& p) const {
  if (!(p.x() >= 0.0 && p.y() >= 0.0 && p.x() < image_width_ && p.y() < image_height_)) return std::nullopt;
  return std::array<int, 2>{static_cast<int>(p.x()) / cell_size_, static_cast<int>(p.y()) / cell_size_};
}

bool OccupancyGrid::block_free(const Vector2& p) const {
  const auto cell = cell_of(p);
  if (!cell) return false;
  for (int cy = std::max(0, (*cell)[1] - 1); cy <= std::min(rows_ - 1, (*cell)[1] + 1); ++cy) {
    for (int cx = std::max(0, (*cell)[0] - 1); cx <= std::min(cols_ - 1, (*cell)[0] + 1); ++cx) {
      if (occupied(cx, cy)) return false;
    }
  }
  return true;
}

void OccupancyGrid::mark_block(const Vector2& p) {
  const auto cell = cell_of(p);
  if (!cell) return;
  for (int cy = std::max(0, (*cell)[1] - 1); cy <= std::min(rows_ - 1, (*cell)[1] + 1); ++cy) {
    for (int cx = std::max(0, (*cell)[0] - 1); cx <= std::min(cols_ - 1, (*cell)[0] + 1); ++cx) {
      cells_[index(cx, cy)] = 1;
    }
  }
}

void OccupancyGrid::clear() { std::fill(cells_.begin(), cells_.end(), 0); }

int OccupancyGrid::occupied_count() const {
  return static_cast<int>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

std::vector<int> OccupancyGrid::distance_to_occupied() const {
  constexpr int kFar = INT_MAX / 4;
  std::vector<int> dist(cells_.size(), kFar);
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    if (cells_[i]) dist[i] = 0;
  }
  // Two-pass chamfer with unit weights on the 8-neighbourhood gives the exact Chebyshev distance.
  for (int cy = 0; cy < rows_; ++cy) {
    for (int cx = 0; cx < cols_; ++cx) {
      int& d = dist[index(cx, cy)];
      if (cx > 0) d = std::min(d, dist[index(cx - 1, cy)] + 1);
      if (cy > 0) {
        d = std::min(d, dist[index(cx, cy - 1)] + 1);
        if (cx > 0) d = std::min(d, dist[index(cx - 1, cy - 1)] + 1);
        if (cx + 1 < cols_) d = std::min(d, dist[index(cx + 1, cy - 1)] + 1);
      }
    }
  }
  for (int cy = rows_ - 1; cy >= 0; --cy) {
    for (int cx = cols_ - 1; cx >= 0; --cx) {
      int& d = dist[index(cx, cy)];
      if (cx + 1 < cols_) d = std::min(d, dist[index(cx + 1, cy)] + 1);
      if (cy + 1 < rows_) {
        d = std::min(d, dist[index(cx, cy + 1)] + 1);
        if (cx + 1 < cols_) d = std::min(d, dist[index(cx + 1, cy + 1)] + 1);
        if (cx > 0) d = std::min(d, dist[index(cx - 1, cy + 1)] + 1);
      }
    }
  }
  return dist;
}

// ---------------------------------------------------------------------------------------------
// Corner detection

namespace {

constexpr std::array<std::array<int, 2>, 16> kCircle = {{
    {0, -3}, {1, -3}, {2, -2}, {3, -1}, {3, 0}, {3, 1}, {2, 2}, {1, 3},
    {0, 3}, {-1, 3}, {-2, 2}, {-3, 1}, {-3, 0}, {-3, -1}, {-2, -2}, {-1, -3},
}};

constexpr int kArcLength = 9;
constexpr int kShiTomasiHalf = 3;

bool has_arc(const std::array<int, 16>& sign, int want) {
  int run = 0;
  for (int i = 0; i < 16 + kArcLength - 1; ++i) {
    if (sign[static_cast<std::size_t>(i % 16)] == want) {
      if (++run >= kArcLength) return true;
    } else {
      run = 0;
    }
  }
  return false;
}

}  // namespace

bool fast9_test(const ImagePlane& plane, int u, int v, double threshold) {
  const double center = plane.intensity(u, v);
  const double hi = center + threshold;
  const double lo = center - threshold;
  // A 9-arc covers at least two of the four compass points.
  int brighter = 0;
  int darker = 0;
  for (int k = 0; k < 16; k += 4) {
    const double i = plane.intensity(u + kCircle[static_cast<std::size_t>(k)][0], v + kCircle[static_cast<std::size_t>(k)][1]);
    brighter += i > hi;
    darker += i < lo;
  }
  if (brighter < 2 && darker < 2) return false;
  std::array<int, 16> sign{};
  for (std::size_t k = 0; k < 16; ++k) {
    const double i = plane.intensity(u + kCircle[k][0], v + kCircle[k][1]);
    sign[k] = i > hi ? 1 : (i < lo ? -1 : 0);
  }
  return (brighter >= 2 && has_arc(sign, 1)) || (darker >= 2 && has_arc(sign, -1));
}

double shi_tomasi_score(const ImagePlane& plane, const Vector2& p) {
  const int u = static_cast<int>(std::lround(p.x()));
  const int v = static_cast<int>(std::lround(p.y()));
  constexpr int h = kShiTomasiHalf;
  if (u - h < 0 || v - h < 0 || u + h > plane.width() - 1 || v + h > plane.height() - 1) {
    throw Error(ErrorCode::kOutOfImage, "7x7 structure tensor window leaves the image");
  }
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  for (int dv = -h; dv <= h; ++dv) {
    for (int du = -h; du <= h; ++du) {
      const double gu = plane.grad_u(u + du, v + dv);
      const double gv = plane.grad_v(u + du, v + dv);
      a += gu * gu;
      b += gu * gv;
      c += gv * gv;
    }
  }
  const double half_trace = 0.5 * (a + c);
  const double half_diff = 0.5 * (a - c);
  return half_trace - std::sqrt(half_diff * half_diff + b * b);
}

std::vector<Feature> detect_corners(const ImagePyramid& pyramid, const FeatureConfig& config) {
  const ImagePlane& plane = pyramid.level(0);
  struct Scored {
    Vector2 p;
    double score;
  };
  std::vector<Scored> raw;
  const int border = kDescriptorBorder;
  for (int v = border; v < plane.height() - border; ++v) {
    for (int u = border; u < plane.width() - border; ++u) {
      if (!fast9_test(plane, u, v, config.fast_threshold)) continue;
      const Vector2 p(u, v);
      const double score = shi_tomasi_score(plane, p);
      if (score >= config.min_shi_tomasi) raw.push_back({p, score});
    }
  }
  // Raster order breaks score ties deterministically.
  std::stable_sort(raw.begin(), raw.end(), [](const Scored& x, const Scored& y) { return x.score > y.score; });

  const double r2 = config.nms_radius * config.nms_radius;
  const int bucket = std::max(1, static_cast<int>(std::ceil(config.nms_radius)));
  const int bw = plane.width() / bucket + 1;
  const int bh = plane.height() / bucket + 1;
  std::vector<std::vector<Vector2>> buckets(static_cast<std::size_t>(bw) * bh);
  std::vector<Feature> corners;
  for (const Scored& s : raw) {
    if (static_cast<int>(corners.size()) >= config.max_corners) break;
    const int bx = static_cast<int>(s.p.x()) / bucket;
    const int by = static_cast<int>(s.p.y()) / bucket;
    bool suppressed = false;
    for (int y = std::max(0, by - 1); y <= std::min(bh - 1, by + 1) && !suppressed; ++y) {
      for (int x = std::max(0, bx - 1); x <= std::min(bw - 1, bx + 1) && !suppressed; ++x) {
        for (const Vector2& q : buckets[static_cast<std::size_t>(y) * bw + x]) {
          if ((q - s.p).squaredNorm() <= r2) {
            suppressed = true;
            break;
          }
        }
      }
    }
    if (suppressed) continue;
    buckets[static_cast<std::size_t>(by) * bw + bx].push_back(s.p);
    Feature f(FeatureKind::kCorner, s.p);
    f.score = s.score;
    f.descriptor = compute_descriptor(plane, s.p);
    f.patch = extract_patch(plane, s.p);
    corners.push_back(std::move(f));
  }
  return corners;
}

// ---------------------------------------------------------------------------------------------
// Matching

MatchResult match_corners(std::span<const MatchQuery> map, const CameraIntrinsics& camera,
                          std::span<const Feature> frame_corners, const FrameState& prior, double window,
                          const FeatureConfig& config) {
  MatchResult result;
  const Pose cur_from_ref = prior.pose();
  const double window2 = window * window;

  struct Proposal {
    std::size_t map_index;
    std::size_t frame_index;
    int distance;
  };
  std::vector<Proposal> proposals;
  std::vector<std::uint8_t> visible(map.size(), 0);

  for (std::size_t i = 0; i < map.size(); ++i) {
    const Feature& f = *map[i].feature;
    if (!f.descriptor || !(f.idepth > 0.0)) continue;
    const WarpOutcome w = try_warp(camera, cur_from_ref * map[i].ref_from_host, f.p, f.idepth, 0.0);
    if (!w.ok()) continue;
    visible[i] = 1;
    int best = INT_MAX;
    int second = INT_MAX;
    std::size_t best_index = 0;
    for (std::size_t j = 0; j < frame_corners.size(); ++j) {
      const Feature& c = frame_corners[j];
      if (!c.descriptor) continue;
      if ((c.p - w.point.p).squaredNorm() >= window2) continue;
      const int d = hamming(*f.descriptor, *c.descriptor);
      if (d < best) {
        second = best;
        best = d;
        best_index = j;
      } else if (d < second) {
        second = d;
      }
    }
    if (best > config.match_threshold) continue;
    if (second != INT_MAX && best > config.ratio_test * second) continue;
    proposals.push_back({i, best_index, best});
  }

  // One-to-one: each frame corner keeps its lowest-distance claimant.
  std::stable_sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
    return a.frame_index != b.frame_index ? a.frame_index < b.frame_index : a.distance < b.distance;
  });
  std::vector<std::uint8_t> matched(map.size(), 0);
  for (std::size_t k = 0; k < proposals.size(); ++k) {
    if (k > 0 && proposals[k].frame_index == proposals[k - 1].frame_index) continue;
    const Proposal& p = proposals[k];
    matched[p.map_index] = 1;
    result.matches.push_back({map[p.map_index].feature->id, p.map_index, p.frame_index,
                              frame_corners[p.frame_index].p, p.distance});
  }
  std::sort(result.matches.begin(), result.matches.end(),
            [](const Match& a, const Match& b) { return a.map_index < b.map_index; });
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (visible[i] && !matched[i]) result.unmatched_visible.push_back(map[i].feature->id);
  }
  return result;
}

// ---------------------------------------------------------------------------------------------
// Pixel sampling and activation

namespace {

constexpr int kThresholdBlock = 32;
constexpr int kCornerExclusion = 3;
constexpr int kSampleBorder = 8;

double median_of(std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
  std::nth_element(values.begin(), mid, values.end());
  return *mid;
}

}  // namespace

std::vector<Feature> sample_pixel_candidates(const ImagePyramid& pyramid, OccupancyGrid& grid,
                                             std::span<const Feature> corners, int budget,
                                             const FeatureConfig& config) {
  std::vector<Feature> out;
  if (budget <= 0) return out;
  const ImagePlane& plane = pyramid.level(0);
  const int w = plane.width();
  const int h = plane.height();

  std::vector<double> magnitude(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < magnitude.size(); ++i) {
    magnitude[i] = std::hypot(plane.grad_u()[i], plane.grad_v()[i]);
  }

  const int blocks_x = (w + kThresholdBlock - 1) / kThresholdBlock;
  const int blocks_y = (h + kThresholdBlock - 1) / kThresholdBlock;
  std::vector<double> threshold(static_cast<std::size_t>(blocks_x) * blocks_y);
  std::vector<double> scratch;
  for (int by = 0; by < blocks_y; ++by) {
    for (int bx = 0; bx < blocks_x; ++bx) {
      scratch.clear();
      for (int v = by * kThresholdBlock; v < std::min(h, (by + 1) * kThresholdBlock); ++v) {
        for (int u = bx * kThresholdBlock; u < std::min(w, (bx + 1) * kThresholdBlock); ++u) {
          scratch.push_back(magnitude[static_cast<std::size_t>(v) * w + u]);
        }
      }
      threshold[static_cast<std::size_t>(by) * blocks_x + bx] =
          std::max(median_of(scratch) * config.g_th, config.gradient_floor);
    }
  }

  std::vector<std::uint8_t> near_corner(magnitude.size(), 0);
  for (const Feature& c : corners) {
    const int cu = static_cast<int>(std::lround(c.p.x()));
    const int cv = static_cast<int>(std::lround(c.p.y()));
    for (int dv = -kCornerExclusion; dv <= kCornerExclusion; ++dv) {
      for (int du = -kCornerExclusion; du <= kCornerExclusion; ++du) {
        if (du * du + dv * dv > kCornerExclusion * kCornerExclusion) continue;
        const int u = cu + du;
        const int v = cv + dv;
        if (u >= 0 && v >= 0 && u < w && v < h) near_corner[static_cast<std::size_t>(v) * w + u] = 1;
      }
    }
  }

  // Best qualifying pixel of every cell, visited strongest first.
  struct CellBest {
    double magnitude;
    int u;
    int v;
  };
  std::vector<CellBest> best;
  const int cs = grid.cell_size();
  for (int cy = 0; cy < grid.rows(); ++cy) {
    for (int cx = 0; cx < grid.cols(); ++cx) {
      CellBest cell{-1.0, 0, 0};
      for (int v = std::max(kSampleBorder, cy * cs); v < std::min(h - kSampleBorder, (cy + 1) * cs); ++v) {
        for (int u = std::max(kSampleBorder, cx * cs); u < std::min(w - kSampleBorder, (cx + 1) * cs); ++u) {
          const std::size_t i = static_cast<std::size_t>(v) * w + u;
          if (near_corner[i]) continue;
          const double t = threshold[static_cast<std::size_t>(v / kThresholdBlock) * blocks_x + u / kThresholdBlock];
          if (magnitude[i] > t && magnitude[i] > cell.magnitude) cell = {magnitude[i], u, v};
        }
      }
      if (cell.magnitude > 0.0) best.push_back(cell);
    }
  }
  std::stable_sort(best.begin(), best.end(),
                   [](const CellBest& a, const CellBest& b) { return a.magnitude > b.magnitude; });
  for (const CellBest& cell : best) {
    if (static_cast<int>(out.size()) >= budget) break;
    const Vector2 p(cell.u, cell.v);
    if (!grid.block_free(p)) continue;
    grid.mark_block(p);
    Feature f(FeatureKind::kPixel, p);
    f.patch = extract_patch(plane, p);
    out.push_back(std::move(f));
  }
  return out;
}

bool depth_converged(const Feature& feature, double activation_variance_ratio) {
  return feature.idepth > 0.0 && feature.idepth_variance > 0.0 &&
         feature.idepth_variance < activation_variance_ratio * feature.idepth * feature.idepth;
}

std::vector<Feature*> activate_features(std::span<const ProjectedCandidate> candidates, OccupancyGrid& grid,
                                        int corner_quota, int pixel_quota, double activation_variance_ratio) {
  std::vector<Feature*> activated;
  std::vector<const ProjectedCandidate*> corners;
  std::vector<const ProjectedCandidate*> pixels;
  for (const ProjectedCandidate& c : candidates) {
    if (c.feature->status() != FeatureStatus::kCandidate) continue;
    if (!depth_converged(*c.feature, activation_variance_ratio)) continue;
    (c.feature->is_corner() ? corners : pixels).push_back(&c);
  }

  std::stable_sort(corners.begin(), corners.end(), [](const ProjectedCandidate* a, const ProjectedCandidate* b) {
    return a->feature->score.value_or(0.0) > b->feature->score.value_or(0.0);
  });
  int n_corners = 0;
  for (const ProjectedCandidate* c : corners) {
    if (n_corners >= corner_quota) break;
    if (!grid.block_free(c->p)) continue;
    grid.mark_block(c->p);
    c->feature->transition_to(FeatureStatus::kActive);
    activated.push_back(c->feature);
    ++n_corners;
  }

  std::vector<std::uint8_t> taken(pixels.size(), 0);
  for (int n_pixels = 0; n_pixels < pixel_quota; ++n_pixels) {
    const std::vector<int> dist = grid.distance_to_occupied();
    int best = -1;
    int best_distance = -1;
    for (std::size_t k = 0; k < pixels.size(); ++k) {
      if (taken[k] || !grid.block_free(pixels[k]->p)) continue;
      const auto cell = grid.cell_of(pixels[k]->p);
      const int d = dist[static_cast<std::size_t>((*cell)[1]) * grid.cols() + (*cell)[0]];
      if (d > best_distance) {
        best_distance = d;
        best = static_cast<int>(k);
      }
    }
    if (best < 0) break;
    taken[static_cast<std::size_t>(best)] = 1;
    const ProjectedCandidate* c = pixels[static_cast<std::size_t>(best)];
    grid.mark_block(c->p);
    c->feature->transition_to(FeatureStatus::kActive);
    activated.push_back(c->feature);
  }
  return activated;
}

}  // namespace jointvo
