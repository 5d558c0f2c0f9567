#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "jointvo/config.hpp"
#include "jointvo/error.hpp"
#include "jointvo/harness/dataset.hpp"
#include "jointvo/harness/odometry.hpp"
#include "jointvo/harness/synthetic_scene.hpp"
#include "jointvo/harness/trajectory_metrics.hpp"

namespace fs = std::filesystem;
using namespace jointvo;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitMalformed = 1;
constexpr int kExitTrackingLost = 2;

std::unique_ptr<FrameSource> open_source(const fs::path& input) {
  if (fs::is_directory(input)) {
    auto source = std::make_unique<DatasetSource>(input);
    for (const std::string& w : source->warnings()) std::cerr << "warning: " << w << "\n";
    return source;
  }
  if (!fs::exists(input)) throw Error(ErrorCode::kMalformedDataset, input.string() + ": no such file or directory");
  return std::make_unique<SyntheticSource>(make_scene(load_scene_options(input)));
}

void print_metrics(const AlignmentMetrics& m) {
  std::printf("matched          %zu\n", m.matched);
  std::printf("ate_rmse         %.6g\n", m.ate_rmse);
  std::printf("alignment_error  %.6g\n", m.alignment_error);
  std::printf("drift_per_meter  %.6g\n", m.drift_per_meter);
  std::printf("path_length      %.6g\n", m.path_length);
  std::printf("extent           %.6g\n", m.extent);
  std::printf("scale            %.6g\n", m.scale);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"jointvo: monocular odometry with joint photometric and geometric residuals"};
  app.require_subcommand(1);

  std::string input, config_file, output, init = "gt";
  bool single_thread = false, disable_indirect = false, disable_direct_corners = false;
  std::optional<double> force_k;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  auto* run = app.add_subcommand("run", "Track a dataset directory or a synthetic scene description");
  run->add_option("--input", input, "Dataset directory or scene config file")->required();
  run->add_option("--config", config_file, "key = value configuration file");
  run->add_option("--output", output, "Output directory")->required();
  run->add_option("--init", init, "Bootstrap mode")->check(CLI::IsMember({"gt", "filter"}));
  run->add_flag("--single-thread", single_thread, "Run tracking and mapping on one thread");
  run->add_flag("--disable-indirect", disable_indirect, "Direct only: no corners, matches or geometric residuals");
  run->add_flag("--disable-direct-corners", disable_direct_corners, "Keep corners out of the photometric energy");
  run->add_option("--force-K", force_k, "Use a constant weight K instead of the utility function");
  run->add_option("--set", overrides, "Override a config key (key=value)");
  run->add_option("--seed", seed, "Seed for random initialization");

  std::string scene_file, render_output;
  auto* render = app.add_subcommand("render", "Export a synthetic scene as a dataset directory");
  render->add_option("--scene", scene_file, "Scene config file")->required();
  render->add_option("--output", render_output, "Output directory")->required();

  std::string est_file, gt_file;
  auto* eval = app.add_subcommand("eval", "Sim(3)-aligned trajectory errors");
  eval->add_option("--est", est_file, "Estimated trajectory")->required();
  eval->add_option("--gt", gt_file, "Ground-truth trajectory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitMalformed;
  }

  try {
    if (*run) {
      OdometryOptions options;
      if (!config_file.empty()) apply_config_file(options.config, config_file);
      if (disable_indirect) options.config.tracker.use_indirect = false;
      if (disable_direct_corners) options.config.tracker.corner_photometric = false;
      if (force_k) options.config.tracker.force_k = *force_k;
      for (const std::string& o : overrides) {
        const auto [key, value] = split_assignment(o);
        set_config_value(options.config, key, value);
      }
      options.init = init == "gt" ? InitMode::kGroundTruth : InitMode::kFilter;
      options.single_thread = single_thread;
      options.seed = seed;

      const auto source = open_source(input);
      const OdometryReport report = run_odometry(*source, options);
      write_report(report, output);
      for (const std::string& w : report.warnings) std::cerr << "warning: " << w << "\n";
      std::printf("tracked %zu of %zu frames, %d keyframes\n", report.trajectory.size(), source->size(),
                  report.keyframes);
      if (report.metrics) print_metrics(*report.metrics);
      if (report.tracking_lost_at) {
        std::fprintf(stderr, "tracking lost at frame %zu: %s\n", *report.tracking_lost_at,
                     report.lost_reason.c_str());
        return kExitTrackingLost;
      }
      return kExitOk;
    }
    if (*render) {
      const SyntheticScene scene = make_scene(load_scene_options(scene_file));
      export_dataset(scene, render_output);
      std::printf("wrote %zu frames to %s\n", scene.frames.size(), render_output.c_str());
      return kExitOk;
    }
    if (*eval) {
      print_metrics(compute_alignment_error(read_trajectory(est_file), read_trajectory(gt_file)));
      return kExitOk;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == ErrorCode::kTrackingLost ? kExitTrackingLost : kExitMalformed;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitMalformed;
  }
  return kExitOk;
}
