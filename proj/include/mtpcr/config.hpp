#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include "json.hpp"
#include "mtpcr/cloud_io.hpp"
#include "mtpcr/eval.hpp"
#include "mtpcr/pipeline.hpp"
#include "mtpcr/scene.hpp"

namespace mtpcr {

/// Every tunable of the pipeline, benchmark and scene generator. All
/// randomness derives from `seed`; component seeds are not set directly.
struct RunConfig {
  std::uint64_t seed = 1;
  PipelineConfig pipeline;
  BenchmarkConfig benchmark;
  SceneSpec scene;

  /// Component seeds for this run.
  void apply_seed() {
    pipeline.ransac.rng_seed = derive_seed(seed, 1);
    benchmark.rng_seed = derive_seed(seed, 2);
    scene.rng_seed = derive_seed(seed, 3);
  }

  void validate() const {
    pipeline.validate();
    benchmark.validate();
    scene.validate();
  }

  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) {
    return mix_seed(seed ^ (purpose * 0x9e3779b97f4a7c15ULL));
  }
};

namespace detail {

// Field visitors: one place names every serialized field.

template <typename V>
void visit_fields(RansacConfig& c, V&& v) {
  v("iterations", c.iterations);
  v("inlier_threshold", c.inlier_threshold);
  v("min_inlier_fraction", c.min_inlier_fraction);
  v("max_scoring_points", c.max_scoring_points);
  v("max_ground_tilt_deg", c.max_ground_tilt_deg);
}

template <typename V>
void visit_fields(MatcherConfig& c, V&& v) {
  v("backend", c.backend);
  v("external_command", c.external_command);
  v("work_dir", c.work_dir);
  v("max_keypoints", c.max_keypoints);
  v("ratio_threshold", c.ratio_threshold);
  v("focus_threshold", c.focus_threshold);
  v("focus_margin", c.focus_margin);
  v("focus_enabled", c.focus_enabled);
  v("median_radius", c.median_radius);
  v("pre_blur", c.pre_blur);
  v("harris_k", c.harris_k);
  v("harris_sigma", c.harris_sigma);
  v("nms_radius", c.nms_radius);
  v("relative_response", c.relative_response);
  v("border", c.border);
  v("scale_levels", c.scale_levels);
  v("scale_step", c.scale_step);
  v("patch_step", c.patch_step);
  v("descriptor_blur", c.descriptor_blur);
  v("orientation_radius", c.orientation_radius);
  v("orientation_peak_ratio", c.orientation_peak_ratio);
  v("max_orientations", c.max_orientations);
  v("ratio_exclusion_px", c.ratio_exclusion_px);
  v("geometric_check", c.geometric_check);
  v("candidate_k", c.candidate_k);
  v("geometric_tolerance", c.geometric_tolerance);
  v("max_scale_ratio", c.max_scale_ratio);
  v("expected_scale", c.expected_scale);
  v("scale_tolerance", c.scale_tolerance);
  v("orientation_tolerance_deg", c.orientation_tolerance_deg);
  v("hypothesis_min_separation", c.hypothesis_min_separation);
  v("hypothesis_max_separation", c.hypothesis_max_separation);
  v("hypothesis_bins_evaluated", c.hypothesis_bins_evaluated);
  v("min_geometric_inliers", c.min_geometric_inliers);
  v("support_cell", c.support_cell);
  v("height_radius", c.height_radius);
  v("height_tolerance", c.height_tolerance);
  v("relief_weight", c.relief_weight);
  v("relief_cap", c.relief_cap);
  v("max_height_offset", c.max_height_offset);
}

template <typename V>
void visit_fields(SolveConfig& c, V&& v) {
  v("max_reject_iters", c.max_reject_iters);
  v("residual_multiplier", c.residual_multiplier);
  v("min_abs_residual", c.min_abs_residual);
  v("icp_max_iters", c.icp_max_iters);
  v("icp_max_corr_dist", c.icp_max_corr_dist);
  v("icp_convergence_eps_m", c.icp_convergence_eps_m);
  v("icp_convergence_eps_deg", c.icp_convergence_eps_deg);
  v("icp_target_voxel", c.icp_target_voxel);
  v("icp_source_voxel", c.icp_source_voxel);
  v("icp_ground_voxel", c.icp_ground_voxel);
  v("icp_ground_clearance", c.icp_ground_clearance);
}

template <typename V>
void visit_fields(PipelineConfig& c, V&& v) {
  v("gamma", c.gamma);
  v("resolution_scaling", c.resolution_scaling);
  v("enhancement", c.enhancement);
  v("ground_alignment", c.ground_alignment);
  v("principal_axes", c.principal_axes);
  v("scale_prior", c.scale_prior);
  v("elevation_cues", c.elevation_cues);
  v("max_height_offset", c.max_height_offset);
  v("icp", c.icp);
  v("height_recovery", c.height_recovery);
  v("ransac", c.ransac);
  v("matcher", c.matcher);
  v("solve", c.solve);
}

template <typename V>
void visit_fields(BenchmarkConfig& c, V&& v) {
  v("trials", c.trials);
  v("rot_min_deg", c.rot_min_deg);
  v("rot_max_deg", c.rot_max_deg);
  v("trans_min_m", c.trans_min_m);
  v("trans_max_m", c.trans_max_m);
  v("sigma_r", c.sigma_r);
  v("sigma_t", c.sigma_t);
  v("jobs", c.jobs);
}

template <typename V>
void visit_fields(SceneSpec& c, V&& v) {
  v("extent_x", c.extent_x);
  v("extent_y", c.extent_y);
  v("building_count", c.building_count);
  v("footprint_min", c.footprint_min);
  v("footprint_max", c.footprint_max);
  v("height_min", c.height_min);
  v("height_max", c.height_max);
  v("building_gap", c.building_gap);
  v("street_half_width", c.street_half_width);
  v("aerial_density", c.aerial_density);
  v("aerial_facade_density", c.aerial_facade_density);
  v("aerial_coverage", c.aerial_coverage);
  v("trajectory", c.trajectory);
  v("sensor_range", c.sensor_range);
  v("terrestrial_ground_density", c.terrestrial_ground_density);
  v("terrestrial_facade_density", c.terrestrial_facade_density);
  v("terrestrial_roof_density", c.terrestrial_roof_density);
  v("noise_sigma", c.noise_sigma);
  v("target_overlap", c.target_overlap);
  v("overlap_tolerance", c.overlap_tolerance);
  v("overlap_radius", c.overlap_radius);
}

template <typename V>
void visit_fields(RunConfig& c, V&& v) {
  v("seed", c.seed);
  v("pipeline", c.pipeline);
  v("benchmark", c.benchmark);
  v("scene", c.scene);
}

template <typename T>
concept Visitable = requires(T& t) { visit_fields(t, [](const char*, auto&) {}); };

inline std::string backend_name(MatcherBackend b) { return b == MatcherBackend::kBuiltin ? "builtin" : "external"; }
inline std::string recovery_name(HeightRecovery h) { return h == HeightRecovery::kExact ? "exact" : "dequantized"; }

inline Error config_error(const std::string& path, const std::string& what) {
  return Error(ErrorCode::kParse, "config " + path + ": " + what);
}

template <typename T>
nlohmann::ordered_json to_config_json(T& value) {
  if constexpr (Visitable<T>) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    visit_fields(value, [&](const char* name, auto& field) { j[name] = to_config_json(field); });
    return j;
  } else if constexpr (std::is_same_v<T, MatcherBackend>) {
    return backend_name(value);
  } else if constexpr (std::is_same_v<T, HeightRecovery>) {
    return recovery_name(value);
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    return value.string();
  } else if constexpr (std::is_same_v<T, std::vector<Vec2>>) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : value) arr.push_back({p.x(), p.y()});
    return arr;
  } else {
    return value;
  }
}

template <typename T>
void from_config_json(const nlohmann::json& j, T& value, const std::string& path) {
  if constexpr (Visitable<T>) {
    if (!j.is_object()) throw config_error(path, "expected an object");
    std::set<std::string> known;
    visit_fields(value, [&](const char* name, auto& field) {
      known.insert(name);
      if (j.contains(name)) from_config_json(j[name], field, path.empty() ? name : path + "." + name);
    });
    for (const auto& [key, unused] : j.items())
      if (!known.count(key)) throw config_error(path.empty() ? key : path + "." + key, "unknown key");
  } else if constexpr (std::is_same_v<T, MatcherBackend>) {
    const std::string s = j.is_string() ? j.get<std::string>() : "";
    if (s == "builtin") value = MatcherBackend::kBuiltin;
    else if (s == "external") value = MatcherBackend::kExternal;
    else throw config_error(path, "expected \"builtin\" or \"external\"");
  } else if constexpr (std::is_same_v<T, HeightRecovery>) {
    const std::string s = j.is_string() ? j.get<std::string>() : "";
    if (s == "exact") value = HeightRecovery::kExact;
    else if (s == "dequantized") value = HeightRecovery::kDequantized;
    else throw config_error(path, "expected \"exact\" or \"dequantized\"");
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    if (!j.is_string()) throw config_error(path, "expected a string");
    value = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::vector<Vec2>>) {
    if (!j.is_array()) throw config_error(path, "expected an array of [x, y] pairs");
    std::vector<Vec2> out;
    for (const auto& p : j) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
        throw config_error(path, "expected an array of [x, y] pairs");
      out.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    value = std::move(out);
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw config_error(path, "expected a boolean");
    value = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw config_error(path, "expected a string");
    value = j.get<std::string>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw config_error(path, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) value = j.get<T>();
      else if (j.get<long long>() >= 0) value = static_cast<T>(j.get<long long>());
      else throw config_error(path, "expected a non-negative integer");
    } else {
      value = j.get<T>();
    }
  } else {
    if (!j.is_number()) throw config_error(path, "expected a number");
    value = j.get<T>();
  }
}

}  // namespace detail

/// Serializes every field (the file format accepted by load_run_config).
inline nlohmann::ordered_json run_config_to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  return detail::to_config_json(copy);
}

/// Overlays the fields present in `j` onto `base`; unknown keys are errors.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  detail::from_config_json(j, base, "");
  return base;
}

/// Loads a JSON config file over the defaults and checks every invariant.
inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  const std::string text = detail::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  RunConfig cfg = run_config_from_json(j, std::move(base));
  cfg.validate();
  return cfg;
}

}  // namespace mtpcr
