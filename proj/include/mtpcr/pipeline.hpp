#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>

#include "json.hpp"
#include "mtpcr/bev.hpp"
#include "mtpcr/ground.hpp"
#include "mtpcr/lift.hpp"
#include "mtpcr/match2d.hpp"
#include "mtpcr/solve.hpp"

namespace mtpcr {

struct PipelineConfig {
  RansacConfig ransac;
  double gamma = 1.0;
  bool resolution_scaling = true;  // off: res = 1 for both clouds
  bool enhancement = true;
  bool ground_alignment = true;
  bool principal_axes = true;  // measure raster extents along the cloud's minimum-area rectangle
  bool scale_prior = true;     // tell the matcher the image scale ratio implied by the two resolutions
  bool elevation_cues = true;  // give the matcher per-pixel elevation alongside each image
  /// With both grounds fitted, elevation cues are heights above ground and
  /// matched keypoints may differ by at most this much (meters; 0 disables).
  double max_height_offset = 0.5;
  bool icp = true;
  HeightRecovery height_recovery = HeightRecovery::kExact;
  MatcherConfig matcher;
  SolveConfig solve;

  void validate() const {
    ransac.validate();
    matcher.validate();
    solve.validate();
    if (!(gamma > 0.0)) throw Error(ErrorCode::kInvalidParameter, "gamma must be > 0");
    if (!(max_height_offset >= 0.0)) throw Error(ErrorCode::kInvalidParameter, "max_height_offset must be >= 0");
  }
};

struct RasterSummary {
  double res = 1.0;
  int width = 0;
  int height = 0;
  double z_min = 0.0;
  double z_max = 0.0;
  std::size_t ground_inliers = 0;
};

struct RegistrationReport {
  RigidTransform transform;  // original source frame -> original target frame
  RasterSummary source, target;
  MatchReport matching;
  std::size_t correspondences = 0;
  SolveDiagnostics solve;
  RigidTransform coarse;  // after robust SVD, before ICP (original frames)
  std::map<std::string, double> stage_seconds;
};

/// Raster heights in meters (H is in scaled units); NaN where empty.
/// Per-pixel height in meters above `datum` (NaN where empty).
inline Elevation elevation_meters(const BevRaster& r, double datum = 0.0) {
  Elevation e(r.H.width, r.H.height);
  for (std::size_t i = 0; i < e.data.size(); ++i) e.data[i] = r.H.data[i] / r.res - datum;
  return e;
}

/// Intermediate products kept for diagnostics and figure export.
struct PreparedCloud {
  PointCloud aligned;
  RigidTransform alignment;
  BevRaster raster;
  ImageU8 image;  // what the matcher sees
  std::size_t ground_inliers = 0;
  std::optional<double> ground_z;  // ground plane height in the aligned frame
};

namespace detail {

template <typename Fn>
auto run_stage(const char* name, std::map<std::string, double>& timings, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      timings[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } else {
      auto r = fn();
      timings[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      return r;
    }
  } catch (const Error& e) {
    if (!e.stage().empty()) throw;
    throw e.with_stage(name);
  }
}

/// Voxel-downsampled cloud for ICP. Ground points are thinned to the coarser
/// ground voxel so that structure edges, not the ground, constrain the
/// horizontal offset.
inline PointCloud icp_cloud(const PreparedCloud& p, double voxel, const SolveConfig& cfg) {
  if (!p.ground_z || !(cfg.icp_ground_voxel > voxel)) return voxel_downsample(p.aligned, voxel);
  PointCloud ground, rest;
  for (const auto& q : p.aligned.points)
    (std::abs(q.z() - *p.ground_z) <= cfg.icp_ground_clearance ? ground : rest).points.push_back(q);
  PointCloud out = voxel_downsample(rest, voxel);
  for (const auto& q : voxel_downsample(ground, cfg.icp_ground_voxel).points) out.points.push_back(q);
  return out;
}

}  // namespace detail

/// Ground alignment, scaling and rasterization of one cloud.
inline PreparedCloud prepare_cloud(const PointCloud& cloud, const PipelineConfig& cfg,
                                   std::map<std::string, double>& timings) {
  PreparedCloud pc;
  detail::run_stage("ground", timings, [&] {
    if (!cfg.ground_alignment) {
      pc.aligned = cloud;
      return;
    }
    const auto fit = fit_ground_plane(cloud, cfg.ransac);
    auto al = align_to_xoy(cloud, fit.plane);
    pc.aligned = std::move(al.cloud);
    pc.alignment = al.transform;
    pc.ground_inliers = fit.inlier_count;
    pc.ground_z = -Plane::canonical(fit.plane.normal, fit.plane.d).d;
  });
  if (cfg.principal_axes) {
    const RigidTransform yaw = principal_yaw(pc.aligned);
    pc.aligned = apply_transform(pc.aligned, yaw);
    pc.alignment = yaw * pc.alignment;
  }
  detail::run_stage("bev", timings, [&] {
    const double res = cfg.resolution_scaling ? compute_resolution(pc.aligned, cfg.gamma) : 1.0;
    pc.raster = rasterize(scale_cloud(pc.aligned, res), res);
    pc.image = cfg.enhancement ? enhance(pc.raster.G) : pc.raster.G;
  });
  return pc;
}

inline PreparedCloud prepare_cloud(const PointCloud& cloud, const PipelineConfig& cfg) {
  std::map<std::string, double> timings;
  return prepare_cloud(cloud, cfg, timings);
}

/// Full registration: returns T with apply_transform(source, T) aligned to target.
/// 2D matching of two prepared clouds with the configured priors.
inline MatchReport match_prepared(const PreparedCloud& ps, const PreparedCloud& pt, const PipelineConfig& cfg) {
  MatcherConfig mcfg = cfg.matcher;
  if (cfg.scale_prior && mcfg.expected_scale == 0.0) mcfg.expected_scale = pt.raster.res / ps.raster.res;
  if (!cfg.elevation_cues) return match_pipeline_detailed(ps.image, pt.image, mcfg);
  const bool grounded = ps.ground_z && pt.ground_z;
  if (grounded) mcfg.max_height_offset = cfg.max_height_offset;
  const Elevation ea = elevation_meters(ps.raster, grounded ? *ps.ground_z : 0.0);
  const Elevation eb = elevation_meters(pt.raster, grounded ? *pt.ground_z : 0.0);
  return match_pipeline_detailed(ps.image, pt.image, mcfg, &ea, &eb);
}

inline RegistrationReport register_clouds(const PointCloud& source, const PointCloud& target,
                                          const PipelineConfig& cfg = {}) {
  cfg.validate();
  require_non_empty(source, "register source");
  require_non_empty(target, "register target");
  RegistrationReport rep;
  auto& tm = rep.stage_seconds;
  const PreparedCloud ps = prepare_cloud(source, cfg, tm);
  const PreparedCloud pt = prepare_cloud(target, cfg, tm);
  auto summary = [](const PreparedCloud& p) {
    return RasterSummary{p.raster.res, p.raster.width, p.raster.height, p.raster.z_min, p.raster.z_max, p.ground_inliers};
  };
  rep.source = summary(ps);
  rep.target = summary(pt);

  rep.matching = detail::run_stage("match", tm, [&] { return match_prepared(ps, pt, cfg); });
  const auto cs = detail::run_stage("lift", tm, [&] {
    return lift_matches(rep.matching.matches, ps.raster, pt.raster, cfg.height_recovery);
  });
  rep.correspondences = cs.size();
  const auto coarse = detail::run_stage("solve", tm, [&] { return robust_estimate(cs, cfg.solve); });
  rep.solve = coarse.diagnostics;
  RigidTransform aligned_T = coarse.transform;
  if (cfg.icp) {
    const auto icp = detail::run_stage("icp", tm, [&] {
      const PointCloud src = detail::icp_cloud(ps, cfg.solve.icp_source_voxel, cfg.solve);
      const PointCloud tgt = detail::icp_cloud(pt, cfg.solve.icp_target_voxel, cfg.solve);
      return icp_refine(src, tgt, aligned_T, cfg.solve);
    });
    aligned_T = icp.transform;
    rep.solve.icp_iterations = icp.diagnostics.icp_iterations;
    rep.solve.icp_initial_mean_residual = icp.diagnostics.icp_initial_mean_residual;
    rep.solve.icp_final_mean_residual = icp.diagnostics.icp_final_mean_residual;
    rep.solve.icp_pairs = icp.diagnostics.icp_pairs;
  }
  const RigidTransform back = pt.alignment.inverse();
  rep.coarse = back * coarse.transform * ps.alignment;
  rep.transform = back * aligned_T * ps.alignment;
  return rep;
}

inline nlohmann::ordered_json transform_to_json(const RigidTransform& T) {
  nlohmann::ordered_json j;
  j["R"] = nlohmann::ordered_json::array();
  for (int r = 0; r < 3; ++r) j["R"].push_back({T.R(r, 0), T.R(r, 1), T.R(r, 2)});
  j["t"] = {T.t.x(), T.t.y(), T.t.z()};
  return j;
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
  try {
    RigidTransform T;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) T.R(r, c) = j.at("R").at(r).at(c).get<double>();
    for (int r = 0; r < 3; ++r) T.t(r) = j.at("t").at(r).get<double>();
    return T;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed transform JSON: ") + e.what());
  }
}

/// Report JSON; `include_timings` is off when byte-stable output is required.
inline nlohmann::ordered_json report_to_json(const RegistrationReport& rep, bool include_timings = false) {
  auto raster = [](const RasterSummary& r) {
    return nlohmann::ordered_json{{"res", r.res},         {"width", r.width},   {"height", r.height},
                                  {"z_min", r.z_min},     {"z_max", r.z_max},   {"ground_inliers", r.ground_inliers}};
  };
  nlohmann::ordered_json j;
  j["schema"] = "mtpcr-report/1";
  j["transform"] = transform_to_json(rep.transform);
  j["coarse_transform"] = transform_to_json(rep.coarse);
  auto& st = j["stages"];
  st["source_raster"] = raster(rep.source);
  st["target_raster"] = raster(rep.target);
  st["match"] = {{"initial", rep.matching.initial_count},
                 {"final", rep.matching.matches.size()},
                 {"overlap_source", rep.matching.overlap.source},
                 {"overlap_target", rep.matching.overlap.target},
                 {"focus_triggered", rep.matching.focus_triggered}};
  st["lift"] = {{"correspondences", rep.correspondences}};
  st["solve"] = {{"inlier_counts", rep.solve.inlier_counts}, {"final_rms_m", rep.solve.final_rms}};
  st["icp"] = {{"iterations", rep.solve.icp_iterations},
               {"initial_mean_residual_m", rep.solve.icp_initial_mean_residual},
               {"final_mean_residual_m", rep.solve.icp_final_mean_residual},
               {"pairs", rep.solve.icp_pairs}};
  if (include_timings) {
    auto& t = st["seconds"];
    for (const auto& [k, v] : rep.stage_seconds) t[k] = v;
  }
  return j;
}

}  // namespace mtpcr
