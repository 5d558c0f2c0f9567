#include <array>
#include <bit>
#include <cmath>
#include <random>
#include <string>

#include "jointvo/error.hpp"
#include "jointvo/features.hpp"

namespace jointvo {

namespace {

constexpr int kNumTests = 256;
constexpr int kTestRadius = 14;
constexpr int kOrientationRadius = 15;
constexpr int kBoxHalf = 1;

struct BinaryTest {
  std::array<int, 2> s;
  std::array<int, 2> t;
};

// Raw engine output only: distribution objects are implementation-defined across standard
// libraries and would break descriptor reproducibility.
std::array<int, 2> draw_offset(std::mt19937& engine) {
  constexpr std::uint32_t span = 2 * kTestRadius + 1;
  while (true) {
    const int x = static_cast<int>(engine() % span) - kTestRadius;
    const int y = static_cast<int>(engine() % span) - kTestRadius;
    if (x * x + y * y <= kTestRadius * kTestRadius) return {x, y};
  }
}

const std::array<BinaryTest, kNumTests>& test_table() {
  static const std::array<BinaryTest, kNumTests> table = [] {
    std::array<BinaryTest, kNumTests> out{};
    std::mt19937 engine(0x0b5eedu);
    for (auto& test : out) {
      test.s = draw_offset(engine);
      do {
        test.t = draw_offset(engine);
      } while (test.t == test.s);
    }
    return out;
  }();
  return table;
}

double box_mean(const ImagePlane& plane, int u, int v) {
  double sum = 0.0;
  for (int dv = -kBoxHalf; dv <= kBoxHalf; ++dv) {
    for (int du = -kBoxHalf; du <= kBoxHalf; ++du) sum += plane.intensity(u + du, v + dv);
  }
  return sum / ((2 * kBoxHalf + 1) * (2 * kBoxHalf + 1));
}

void require_patch_inside(const ImagePlane& plane, int u, int v) {
  constexpr int r = kOrientationRadius;
  if (u - r < 0 || v - r < 0 || u + r > plane.width() - 1 || v + r > plane.height() - 1) {
    throw Error(ErrorCode::kOutOfImage,
                "31x31 descriptor patch at (" + std::to_string(u) + ", " + std::to_string(v) + ")");
  }
}

}  // namespace

int hamming(const Descriptor& a, const Descriptor& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::popcount(a[i] ^ b[i]);
  return d;
}

double patch_orientation(const ImagePlane& plane, const Vector2& p) {
  const int u = static_cast<int>(std::lround(p.x()));
  const int v = static_cast<int>(std::lround(p.y()));
  require_patch_inside(plane, u, v);
  double m10 = 0.0;
  double m01 = 0.0;
  constexpr int r = kOrientationRadius;
  for (int dv = -r; dv <= r; ++dv) {
    for (int du = -r; du <= r; ++du) {
      if (du * du + dv * dv > r * r) continue;
      const double i = plane.intensity(u + du, v + dv);
      m10 += du * i;
      m01 += dv * i;
    }
  }
  return std::atan2(m01, m10);
}

Descriptor compute_descriptor(const ImagePlane& plane, const Vector2& p) {
  const int u = static_cast<int>(std::lround(p.x()));
  const int v = static_cast<int>(std::lround(p.y()));
  require_patch_inside(plane, u, v);
  const double angle = patch_orientation(plane, p);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const auto rotated = [&](const std::array<int, 2>& o) {
    const int x = static_cast<int>(std::lround(c * o[0] - s * o[1]));
    const int y = static_cast<int>(std::lround(s * o[0] + c * o[1]));
    return std::array<int, 2>{u + x, v + y};
  };
  Descriptor out{};
  const auto& table = test_table();
  for (int i = 0; i < kNumTests; ++i) {
    const auto a = rotated(table[static_cast<std::size_t>(i)].s);
    const auto b = rotated(table[static_cast<std::size_t>(i)].t);
    if (box_mean(plane, a[0], a[1]) < box_mean(plane, b[0], b[1])) {
      out[static_cast<std::size_t>(i / 64)] |= std::uint64_t{1} << (i % 64);
    }
  }
  return out;
}

}  // namespace jointvo
