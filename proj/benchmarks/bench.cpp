#include <benchmark/benchmark.h>

#include "jacobian_check.hpp"
#include "jointvo/features.hpp"
#include "jointvo/joint_tracker.hpp"
#include "jointvo/mapper.hpp"
#include "scene_support.hpp"
#include "system_support.hpp"

namespace jointvo {
namespace {

// Shared full-resolution rendering; building it dominates setup, not the timed loops.
const SyntheticScene& orbit() {
  static const SyntheticScene scene = [] {
    SceneOptions o;
    o.frames = 40;
    return make_scene(o);
  }();
  return scene;
}

const RenderedFrame& first_frame() {
  static const RenderedFrame frame = render_frame(orbit(), 0);
  return frame;
}

void BM_RenderFrame(benchmark::State& state) {
  const SyntheticScene& scene = orbit();
  for (auto _ : state) benchmark::DoNotOptimize(render_frame(scene, 1));
}
BENCHMARK(BM_RenderFrame)->Unit(benchmark::kMillisecond);

void BM_BuildPyramid(benchmark::State& state) {
  const RenderedFrame& f = first_frame();
  for (auto _ : state) benchmark::DoNotOptimize(build_pyramid(f.image, orbit().intrinsics, 1.0, 4));
}
BENCHMARK(BM_BuildPyramid)->Unit(benchmark::kMillisecond);

void BM_DetectCorners(benchmark::State& state) {
  const Config config;
  for (auto _ : state) benchmark::DoNotOptimize(detect_corners(*first_frame().pyramid, config.features));
}
BENCHMARK(BM_DetectCorners)->Unit(benchmark::kMillisecond);

void BM_PhotometricResidual(benchmark::State& state) {
  testing::Gen gen(3);
  const testing::PhotometricConfiguration c = testing::random_photometric_configuration(gen);
  for (auto _ : state) benchmark::DoNotOptimize(photometric_residual(c.host, c.cur, c.state, c.camera, 9.0));
}
BENCHMARK(BM_PhotometricResidual);

void BM_JointStep(benchmark::State& state) {
  testing::Gen gen(4);
  const int n = static_cast<int>(state.range(0));
  const ResidualSystem sys = testing::random_system(gen, n, n / 4);
  for (auto _ : state) benchmark::DoNotOptimize(joint_step(sys, 2.5, 1e-4));
  state.SetItemsProcessed(state.iterations() * (n + n / 4));
}
BENCHMARK(BM_JointStep)->Arg(200)->Arg(2000);

void BM_TrackFrame(benchmark::State& state) {
  const Config config;
  static const testing::SceneReference ref = testing::make_scene_reference(orbit(), 0, config, 600);
  static const TrackingFrame frame = testing::make_tracking_frame(orbit(), 1, config);
  for (auto _ : state) benchmark::DoNotOptimize(track_frame(ref.reference, frame, FrameState{}, config));
}
BENCHMARK(BM_TrackFrame)->Unit(benchmark::kMillisecond);

void BM_PhotometricBa(benchmark::State& state) {
  const Config config;
  static const LocalMap window = testing::make_window(orbit(), {0, 2, 4, 6}, config, 150);
  for (auto _ : state) {
    state.PauseTiming();
    LocalMap map = window;
    state.ResumeTiming();
    benchmark::DoNotOptimize(photometric_ba(map, config));
  }
}
BENCHMARK(BM_PhotometricBa)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace jointvo

BENCHMARK_MAIN();
