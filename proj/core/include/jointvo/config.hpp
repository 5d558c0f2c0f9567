#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace jointvo {

struct FeatureConfig {
  int max_corners = 600;
  double min_shi_tomasi = 50.0;
  double fast_threshold = 20.0;
  double nms_radius = 3.0;
  int cell_size = 10;
  int match_threshold = 64;
  double ratio_test = 0.8;
  double search_window = 15.0;
  int corner_quota = 50;
  int pixel_quota = 150;
  double g_th = 1.5;
  double gradient_floor = 7.0;
  int max_match_failures = 5;
  /// Candidates activate once idepth_variance < ratio * idepth^2.
  double activation_variance_ratio = 0.01;
};

struct ResidualConfig {
  double gamma_p = 9.0;
  double gamma_g = 1.5;
  double variance_floor = 1e-4;
};

/// Logistic utility K = scale e^{-decay l} / (1 + e^{(midpoint - N_g)/slope}).
struct UtilityConfig {
  double scale = 5.0;
  double level_decay = 2.0;
  double midpoint = 30.0;
  double slope = 4.0;
};

struct TrackerConfig {
  int num_levels = 4;
  int max_iterations_per_level = 10;
  double lm_lambda_init = 1e-4;
  double lm_lambda_up = 5.0;
  double lm_lambda_down = 0.5;
  double convergence_eps = 1e-6;
  double outlier_energy_factor = 3.0;
  int min_track_points = 50;
  int min_track_matches = 10;
  UtilityConfig utility;
  std::optional<double> force_k;
  /// false disables descriptor matching and geometric residuals (direct-only).
  bool use_indirect = true;
  /// false keeps corners out of the photometric energy.
  bool corner_photometric = true;
};

struct MapperConfig {
  int window_size = 7;
  int ba_iterations = 15;
  double ba_convergence_eps = 1e-6;
  double ba_lambda_init = 1e-4;
  double marginalization_epsilon = 1e-3;
  double b_min = 1e-4;
  double flow_weight = 0.06;
  double brightness_weight = 0.2;
  double min_valid_ratio = 0.6;
  double depth_variance_floor = 1e-6;
  int max_epipolar_steps = 100;
  int structure_iterations = 5;
  /// Hybrid keyframes whose live active features drop below this fraction are removed first.
  double min_active_fraction = 0.05;
  /// Initial candidate uncertainty as a fraction of the seeded inverse depth.
  double candidate_initial_sigma = 0.5;
};

struct Config {
  FeatureConfig features;
  ResidualConfig residuals;
  TrackerConfig tracker;
  MapperConfig mapper;
};

/// Sets one flat key (e.g. "search_window", "gamma_p"). Throws kInvalidConfig on unknown keys
/// or unparsable values.
void set_config_value(Config& config, std::string_view key, std::string_view value);

/// Applies `key = value` lines; `#` starts a comment. Section headers in brackets are ignored.
void apply_config_stream(Config& config, std::istream& in, const std::string& source = "<stream>");
void apply_config_file(Config& config, const std::filesystem::path& path);

/// Throws kInvalidConfig when values violate their invariants.
void validate(const Config& config);

std::vector<std::string> config_keys();

/// Splits `key=value`.
std::pair<std::string, std::string> split_assignment(std::string_view text);

}  // namespace jointvo
