#include "jointvo/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "jointvo/error.hpp"

namespace jointvo {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

double parse_double(std::string_view key, std::string_view value) {
  // std::from_chars for double is unavailable on some standard libraries we target.
  std::string text(value);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) {
    throw Error(ErrorCode::kInvalidConfig, "value '" + text + "' for " + std::string(key) + " is not a number");
  }
  return out;
}

int parse_int(std::string_view key, std::string_view value) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw Error(ErrorCode::kInvalidConfig,
                "value '" + std::string(value) + "' for " + std::string(key) + " is not an integer");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw Error(ErrorCode::kInvalidConfig, "value '" + std::string(value) + "' for " + std::string(key) +
                                             " is not a boolean");
}

using Setter = std::function<void(Config&, std::string_view, std::string_view)>;

template <typename T>
Setter bind(T Config::*section, int T::*field) {
  return [=](Config& c, std::string_view k, std::string_view v) { (c.*section).*field = parse_int(k, v); };
}

template <typename T>
Setter bind(T Config::*section, double T::*field) {
  return [=](Config& c, std::string_view k, std::string_view v) { (c.*section).*field = parse_double(k, v); };
}

template <typename T>
Setter bind(T Config::*section, bool T::*field) {
  return [=](Config& c, std::string_view k, std::string_view v) { (c.*section).*field = parse_bool(k, v); };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = [] {
    std::map<std::string, Setter, std::less<>> t;
    using F = FeatureConfig;
    t["max_corners"] = bind(&Config::features, &F::max_corners);
    t["min_shi_tomasi"] = bind(&Config::features, &F::min_shi_tomasi);
    t["fast_threshold"] = bind(&Config::features, &F::fast_threshold);
    t["nms_radius"] = bind(&Config::features, &F::nms_radius);
    t["cell_size"] = bind(&Config::features, &F::cell_size);
    t["match_threshold"] = bind(&Config::features, &F::match_threshold);
    t["ratio_test"] = bind(&Config::features, &F::ratio_test);
    t["search_window"] = bind(&Config::features, &F::search_window);
    t["corner_quota"] = bind(&Config::features, &F::corner_quota);
    t["pixel_quota"] = bind(&Config::features, &F::pixel_quota);
    t["g_th"] = bind(&Config::features, &F::g_th);
    t["gradient_floor"] = bind(&Config::features, &F::gradient_floor);
    t["max_match_failures"] = bind(&Config::features, &F::max_match_failures);
    t["activation_variance_ratio"] = bind(&Config::features, &F::activation_variance_ratio);

    using R = ResidualConfig;
    t["gamma_p"] = bind(&Config::residuals, &R::gamma_p);
    t["gamma_g"] = bind(&Config::residuals, &R::gamma_g);
    t["variance_floor"] = bind(&Config::residuals, &R::variance_floor);

    using T = TrackerConfig;
    t["num_levels"] = bind(&Config::tracker, &T::num_levels);
    t["max_iterations_per_level"] = bind(&Config::tracker, &T::max_iterations_per_level);
    t["lm_lambda_init"] = bind(&Config::tracker, &T::lm_lambda_init);
    t["lm_lambda_up"] = bind(&Config::tracker, &T::lm_lambda_up);
    t["lm_lambda_down"] = bind(&Config::tracker, &T::lm_lambda_down);
    t["convergence_eps"] = bind(&Config::tracker, &T::convergence_eps);
    t["outlier_energy_factor"] = bind(&Config::tracker, &T::outlier_energy_factor);
    t["min_track_points"] = bind(&Config::tracker, &T::min_track_points);
    t["min_track_matches"] = bind(&Config::tracker, &T::min_track_matches);
    t["use_indirect"] = bind(&Config::tracker, &T::use_indirect);
    t["corner_photometric"] = bind(&Config::tracker, &T::corner_photometric);
    t["utility_scale"] = [](Config& c, std::string_view k, std::string_view v) {
      c.tracker.utility.scale = parse_double(k, v);
    };
    t["utility_level_decay"] = [](Config& c, std::string_view k, std::string_view v) {
      c.tracker.utility.level_decay = parse_double(k, v);
    };
    t["utility_midpoint"] = [](Config& c, std::string_view k, std::string_view v) {
      c.tracker.utility.midpoint = parse_double(k, v);
    };
    t["utility_slope"] = [](Config& c, std::string_view k, std::string_view v) {
      c.tracker.utility.slope = parse_double(k, v);
    };
    t["force_k"] = [](Config& c, std::string_view k, std::string_view v) {
      if (v == "none" || v.empty()) {
        c.tracker.force_k.reset();
      } else {
        c.tracker.force_k = parse_double(k, v);
      }
    };

    using M = MapperConfig;
    t["window_size"] = bind(&Config::mapper, &M::window_size);
    t["ba_iterations"] = bind(&Config::mapper, &M::ba_iterations);
    t["ba_convergence_eps"] = bind(&Config::mapper, &M::ba_convergence_eps);
    t["ba_lambda_init"] = bind(&Config::mapper, &M::ba_lambda_init);
    t["marginalization_epsilon"] = bind(&Config::mapper, &M::marginalization_epsilon);
    t["b_min"] = bind(&Config::mapper, &M::b_min);
    t["flow_weight"] = bind(&Config::mapper, &M::flow_weight);
    t["brightness_weight"] = bind(&Config::mapper, &M::brightness_weight);
    t["min_valid_ratio"] = bind(&Config::mapper, &M::min_valid_ratio);
    t["depth_variance_floor"] = bind(&Config::mapper, &M::depth_variance_floor);
    t["max_epipolar_steps"] = bind(&Config::mapper, &M::max_epipolar_steps);
    t["structure_iterations"] = bind(&Config::mapper, &M::structure_iterations);
    t["min_active_fraction"] = bind(&Config::mapper, &M::min_active_fraction);
    t["candidate_initial_sigma"] = bind(&Config::mapper, &M::candidate_initial_sigma);
    return t;
  }();
  return table;
}

}  // namespace

void set_config_value(Config& config, std::string_view key, std::string_view value) {
  const auto it = setters().find(trim(key));
  if (it == setters().end()) {
    throw Error(ErrorCode::kInvalidConfig, "unknown config key '" + std::string(key) + "'");
  }
  it->second(config, it->first, trim(value));
}

std::pair<std::string, std::string> split_assignment(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) {
    throw Error(ErrorCode::kInvalidConfig, "expected key=value, got '" + std::string(text) + "'");
  }
  return {std::string(trim(text.substr(0, eq))), std::string(trim(text.substr(eq + 1)))};
}

void apply_config_stream(Config& config, std::istream& in, const std::string& source) {
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty() || view.front() == '[') continue;
    try {
      auto [key, value] = split_assignment(view);
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      set_config_value(config, key, value);
    } catch (const Error& e) {
      throw Error(ErrorCode::kInvalidConfig, source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(Config& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidConfig, "cannot open config file " + path.string());
  apply_config_stream(config, in, path.string());
}

void validate(const Config& c) {
  const auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(ErrorCode::kInvalidConfig, what);
  };
  require(c.features.max_corners >= 0, "max_corners must be non-negative");
  require(c.features.cell_size > 0, "cell_size must be positive");
  require(c.features.match_threshold >= 0 && c.features.match_threshold <= 256, "match_threshold out of range");
  require(c.features.ratio_test > 0.0 && c.features.ratio_test <= 1.0, "ratio_test must be in (0, 1]");
  require(c.features.search_window >= 0.0, "search_window must be non-negative");
  require(c.residuals.gamma_p > 0.0 && c.residuals.gamma_g > 0.0, "Huber thresholds must be positive");
  require(c.residuals.variance_floor > 0.0, "variance_floor must be positive");
  require(c.tracker.num_levels >= 2, "num_levels must be at least 2");
  require(c.tracker.max_iterations_per_level > 0, "max_iterations_per_level must be positive");
  require(c.tracker.lm_lambda_init > 0.0, "lm_lambda_init must be positive");
  require(c.tracker.lm_lambda_down > 0.0 && c.tracker.lm_lambda_down < 1.0 && c.tracker.lm_lambda_up > 1.0,
          "LM factors must satisfy 0 < down < 1 < up");
  require(c.tracker.convergence_eps > 0.0, "convergence_eps must be positive");
  require(c.tracker.outlier_energy_factor > 0.0, "outlier_energy_factor must be positive");
  require(!c.tracker.force_k || *c.tracker.force_k >= 0.0, "force_k must be non-negative");
  require(c.mapper.window_size >= 2, "window_size must be at least 2");
  require(c.mapper.ba_iterations > 0, "ba_iterations must be positive");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, _] : setters()) keys.push_back(key);
  return keys;
}

}  // namespace jointvo
