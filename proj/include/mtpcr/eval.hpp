#pragma once

#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mtpcr/pipeline.hpp"
#include "mtpcr/random.hpp"
#include "mtpcr/spatial_index.hpp"

namespace mtpcr {

/// ΔT = T_est · T_gt⁻¹.
inline RigidTransform residual_transform(const RigidTransform& est, const RigidTransform& gt) {
  return est * gt.inverse();
}

struct RotTransError {
  double rotation_deg = 0.0;
  double translation_m = 0.0;
};

inline RotTransError rotation_translation_error(const RigidTransform& delta) {
  return {rotation_angle_deg(delta.R), delta.t.norm()};
}

/// Root mean square distance between the source placed by the estimate and by ground truth.
inline double rmsd(const PointCloud& source, const RigidTransform& est, const RigidTransform& gt) {
  require_non_empty(source, "rmsd");
  double sq = 0.0;
  for (const auto& p : source.points) sq += (est(p) - gt(p)).squaredNorm();
  return std::sqrt(sq / static_cast<double>(source.size()));
}

struct MetricReport {
  double e_r = 0.0;  // degrees
  double e_t = 0.0;  // meters
  double rmsd = 0.0;
  bool success = false;
  bool failed = false;  // the pipeline raised; e_r = 180, e_t = rmsd = +inf
  std::string error;
};

inline MetricReport score_registration(const PointCloud& source, const RigidTransform& est, const RigidTransform& gt,
                                       double sigma_r, double sigma_t) {
  MetricReport m;
  const auto err = rotation_translation_error(residual_transform(est, gt));
  m.e_r = err.rotation_deg;
  m.e_t = err.translation_m;
  m.rmsd = rmsd(source, est, gt);
  m.success = m.e_r < sigma_r && m.e_t < sigma_t;
  return m;
}

inline MetricReport failure_report(std::string error) {
  MetricReport m;
  m.e_r = 180.0;
  m.e_t = std::numeric_limits<double>::infinity();
  m.rmsd = std::numeric_limits<double>::infinity();
  m.failed = true;
  m.error = std::move(error);
  return m;
}

/// Successful registration rate with strict thresholds.
inline double srr(const std::vector<MetricReport>& reports, double sigma_r, double sigma_t) {
  if (reports.empty()) throw Error(ErrorCode::kInvalidParameter, "srr of an empty report list");
  std::size_t ok = 0;
  for (const auto& r : reports) ok += r.e_r < sigma_r && r.e_t < sigma_t;
  return static_cast<double>(ok) / static_cast<double>(reports.size());
}

struct BenchmarkConfig {
  int trials = 100;
  double rot_min_deg = 0.0, rot_max_deg = 90.0;
  double trans_min_m = 0.0, trans_max_m = 100.0;
  double sigma_r = 5.0;  // degrees
  double sigma_t = 2.0;  // meters
  std::uint64_t rng_seed = 7;
  int jobs = 1;

  void validate() const {
    if (trials < 1) throw Error(ErrorCode::kInvalidParameter, "trials must be >= 1");
    if (rot_min_deg < 0 || rot_max_deg < rot_min_deg || trans_min_m < 0 || trans_max_m < trans_min_m)
      throw Error(ErrorCode::kInvalidParameter, "benchmark ranges must be non-negative and ordered");
    if (!(sigma_r > 0) || !(sigma_t > 0)) throw Error(ErrorCode::kInvalidParameter, "thresholds must be > 0");
    if (jobs < 1) throw Error(ErrorCode::kInvalidParameter, "jobs must be >= 1");
  }
};

inline Eigen::Vector3d random_unit_vector(std::mt19937_64& rng) {
  const double z = uniform(rng, -1.0, 1.0);
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

/// Uniform random axis with angle uniform in the rotation range; uniform
/// random direction with magnitude uniform in the translation range.
inline RigidTransform sample_random_transform(const BenchmarkConfig& cfg, std::mt19937_64& rng) {
  const Eigen::Vector3d axis = random_unit_vector(rng);
  const double angle = uniform(rng, cfg.rot_min_deg, cfg.rot_max_deg) * std::numbers::pi / 180.0;
  const Eigen::Vector3d dir = random_unit_vector(rng);
  const double mag = uniform(rng, cfg.trans_min_m, cfg.trans_max_m);
  return RigidTransform::from(Eigen::AngleAxisd(angle, axis).toRotationMatrix(), dir * mag);
}

struct OverlapRatio {
  double source = 0.0;
  double target = 0.0;
};

/// Fraction of each cloud's points with a neighbour in the other cloud within `radius`.
inline OverlapRatio compute_overlap_ratio(const PointCloud& source, const PointCloud& target, double radius) {
  require_non_empty(source, "overlap source");
  require_non_empty(target, "overlap target");
  auto frac = [radius](const PointCloud& from, const SpatialIndex& to) {
    std::size_t n = 0;
    for (const auto& p : from.points) n += to.has_neighbor_within(p, radius);
    return static_cast<double>(n) / static_cast<double>(from.size());
  };
  return {frac(source, SpatialIndex(target)), frac(target, SpatialIndex(source))};
}

struct TrialResult {
  int index = 0;
  RigidTransform perturbation;  // applied to the source
  RigidTransform ground_truth;  // perturbed source -> target
  std::optional<RigidTransform> estimate;
  MetricReport metrics;
};

struct MeanErrors {
  double e_r = 0.0, e_t = 0.0, rmsd = 0.0;
  std::size_t count = 0;
};

struct BenchmarkReport {
  std::vector<TrialResult> trials;
  double srr = 0.0;
  MeanErrors mean_successful;  // trials meeting both thresholds
  MeanErrors mean_completed;   // trials where the pipeline produced a transform
  MeanErrors mean_all;         // every trial, failures as sentinels (may be +inf)
};

inline MeanErrors mean_errors(const std::vector<TrialResult>& trials, auto&& include) {
  MeanErrors m;
  for (const auto& t : trials) {
    if (!include(t.metrics)) continue;
    m.e_r += t.metrics.e_r;
    m.e_t += t.metrics.e_t;
    m.rmsd += t.metrics.rmsd;
    ++m.count;
  }
  if (m.count) {
    const auto n = static_cast<double>(m.count);
    m.e_r /= n;
    m.e_t /= n;
    m.rmsd /= n;
  }
  return m;
}

inline BenchmarkReport summarize(std::vector<TrialResult> trials, const BenchmarkConfig& cfg) {
  BenchmarkReport rep;
  rep.trials = std::move(trials);
  std::vector<MetricReport> metrics;
  for (const auto& t : rep.trials) metrics.push_back(t.metrics);
  rep.srr = srr(metrics, cfg.sigma_r, cfg.sigma_t);
  rep.mean_successful = mean_errors(rep.trials, [](const MetricReport& m) { return m.success; });
  rep.mean_completed = mean_errors(rep.trials, [](const MetricReport& m) { return !m.failed; });
  rep.mean_all = mean_errors(rep.trials, [](const MetricReport&) { return true; });
  return rep;
}

/// Random-perturbation protocol: each trial moves the source by a sampled
/// rigid transform, registers it to the target and scores the estimate.
/// Trial i draws from substream (seed, i), so any --jobs value gives the same report.
inline BenchmarkReport run_benchmark(const PointCloud& source, const PointCloud& target,
                                     const RigidTransform& source_to_target_gt, const BenchmarkConfig& cfg,
                                     const PipelineConfig& pipeline) {
  cfg.validate();
  pipeline.validate();
  std::vector<TrialResult> trials(static_cast<std::size_t>(cfg.trials));
  auto run_trial = [&](int i) {
    auto rng = substream(cfg.rng_seed, static_cast<std::uint64_t>(i));
    TrialResult& tr = trials[static_cast<std::size_t>(i)];
    tr.index = i;
    tr.perturbation = sample_random_transform(cfg, rng);
    tr.ground_truth = source_to_target_gt * tr.perturbation.inverse();
    const PointCloud moved = apply_transform(source, tr.perturbation);
    try {
      const auto rep = register_clouds(moved, target, pipeline);
      tr.estimate = rep.transform;
      tr.metrics = score_registration(moved, rep.transform, tr.ground_truth, cfg.sigma_r, cfg.sigma_t);
    } catch (const Error& e) {
      tr.metrics = failure_report(e.what());
    }
  };
  const int jobs = std::min(cfg.jobs, cfg.trials);
  if (jobs <= 1) {
    for (int i = 0; i < cfg.trials; ++i) run_trial(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::jthread> workers;
    for (int w = 0; w < jobs; ++w)
      workers.emplace_back([&] {
        for (int i = next++; i < cfg.trials; i = next++) run_trial(i);
      });
  }
  return summarize(std::move(trials), cfg);
}

namespace detail {

inline nlohmann::ordered_json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json means_to_json(const MeanErrors& m) {
  return {{"count", m.count}, {"e_r_deg", finite_or_null(m.e_r)}, {"e_t_m", finite_or_null(m.e_t)},
          {"rmsd_m", finite_or_null(m.rmsd)}};
}

}  // namespace detail

inline nlohmann::ordered_json benchmark_to_json(const BenchmarkReport& rep, const BenchmarkConfig& cfg) {
  nlohmann::ordered_json j;
  j["schema"] = "mtpcr-bench/1";
  j["config"] = {{"trials", cfg.trials},           {"rot_range_deg", {cfg.rot_min_deg, cfg.rot_max_deg}},
                 {"trans_range_m", {cfg.trans_min_m, cfg.trans_max_m}},
                 {"sigma_r_deg", cfg.sigma_r},     {"sigma_t_m", cfg.sigma_t},
                 {"seed", cfg.rng_seed}};
  j["srr"] = rep.srr;
  j["mean_successful"] = detail::means_to_json(rep.mean_successful);
  j["mean_completed"] = detail::means_to_json(rep.mean_completed);
  // Failed trials contribute e_r = 180 and e_t = rmsd = +inf (null when infinite).
  j["mean_with_failure_sentinels"] = detail::means_to_json(rep.mean_all);
  auto& arr = j["trials"] = nlohmann::ordered_json::array();
  for (const auto& t : rep.trials) {
    nlohmann::ordered_json e;
    e["trial"] = t.index;
    e["perturbation"] = transform_to_json(t.perturbation);
    e["ground_truth"] = transform_to_json(t.ground_truth);
    e["estimate"] = t.estimate ? transform_to_json(*t.estimate) : nlohmann::ordered_json(nullptr);
    e["e_r_deg"] = t.metrics.e_r;
    e["e_t_m"] = detail::finite_or_null(t.metrics.e_t);
    e["rmsd_m"] = detail::finite_or_null(t.metrics.rmsd);
    e["success"] = t.metrics.success;
    e["failed"] = t.metrics.failed;
    if (t.metrics.failed) e["error"] = t.metrics.error;
    arr.push_back(std::move(e));
  }
  return j;
}

/// trial, e_r_deg, e_t_m, rmsd_m, success
inline std::string benchmark_to_csv(const BenchmarkReport& rep) {
  std::string out = "trial,e_r_deg,e_t_m,rmsd_m,success\n";
  for (const auto& t : rep.trials) {
    out += std::to_string(t.index) + "," + detail::format_real(t.metrics.e_r) + "," +
           detail::format_real(t.metrics.e_t) + "," + detail::format_real(t.metrics.rmsd) + "," +
           (t.metrics.success ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace mtpcr
