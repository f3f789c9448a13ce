#pragma once

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "mtpcr/lift.hpp"
#include "mtpcr/spatial_index.hpp"

namespace mtpcr {

struct SolveConfig {
  int max_reject_iters = 10;
  double residual_multiplier = 3.0;
  double min_abs_residual = 1.0;  // meters
  int icp_max_iters = 50;
  double icp_max_corr_dist = 2.0;       // meters
  double icp_convergence_eps_m = 1e-3;  // meters
  double icp_convergence_eps_deg = 1e-3;
  double icp_target_voxel = 0.5;  // meters; applied by register_clouds
  double icp_source_voxel = 1.0;  // meters; applied by register_clouds
  double icp_ground_voxel = 20.0;     // meters; ground points are thinned to this voxel
  double icp_ground_clearance = 0.5;  // meters from the fitted ground plane

  void validate() const {
    if (max_reject_iters < 1 || icp_max_iters < 1 || !(residual_multiplier > 0) || !(min_abs_residual > 0) ||
        !(icp_max_corr_dist > 0) || !(icp_convergence_eps_m > 0) || !(icp_convergence_eps_deg > 0) ||
        !(icp_target_voxel > 0) || !(icp_source_voxel > 0) || !(icp_ground_voxel > 0) || !(icp_ground_clearance >= 0))
      throw Error(ErrorCode::kInvalidParameter, "solve parameters must be positive");
  }
};

struct SolveDiagnostics {
  std::vector<std::size_t> inlier_counts;  // per rejection iteration
  double final_rms = 0.0;                  // meters
  int icp_iterations = 0;
  double icp_initial_mean_residual = 0.0;
  double icp_final_mean_residual = 0.0;
  std::size_t icp_pairs = 0;
};

/// Weighted least-squares rigid transform source -> target via SVD of the
/// cross-covariance, with reflection correction.
inline RigidTransform kabsch(const CorrespondenceSet& cs) {
  if (cs.size() < 3) throw Error(ErrorCode::kTooFewCorrespondences, "kabsch needs at least 3 correspondences");
  double wsum = 0.0;
  for (const auto& c : cs) wsum += std::max(c.confidence, 0.0);
  const bool uniform = !(wsum > 0.0);
  auto weight = [&](const Correspondence3D& c) { return uniform ? 1.0 : std::max(c.confidence, 0.0); };
  if (uniform) wsum = static_cast<double>(cs.size());

  Point3 ps = Point3::Zero(), pt = Point3::Zero();
  for (const auto& c : cs) {
    ps += weight(c) * c.source;
    pt += weight(c) * c.target;
  }
  ps /= wsum;
  pt /= wsum;
  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (const auto& c : cs) H += weight(c) * (c.source - ps) * (c.target - pt).transpose();

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) < 1e-9 * sv(0)) {
    throw Error(ErrorCode::kDegenerateConfiguration, "correspondences are collinear or coincident");
  }
  const Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Matrix3d D = Eigen::Matrix3d::Identity();
  D(2, 2) = (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  Eigen::Matrix3d R = V * D * U.transpose();
  return RigidTransform::from(R, pt - R * ps);
}

namespace detail {

inline double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

}  // namespace detail

struct RobustEstimate {
  RigidTransform transform;
  SolveDiagnostics diagnostics;
  std::vector<std::size_t> inliers;  // indices into the input set
};

/// Iterated Kabsch: fit, then drop pairs whose residual exceeds
/// max(min_abs_residual, residual_multiplier × median residual), until the
/// inlier set stops changing.
inline RobustEstimate robust_estimate(const CorrespondenceSet& cs, const SolveConfig& cfg = {}) {
  cfg.validate();
  if (cs.size() < 3) throw Error(ErrorCode::kTooFewCorrespondences, "robust_estimate needs at least 3 correspondences");
  RobustEstimate out;
  out.inliers.resize(cs.size());
  std::iota(out.inliers.begin(), out.inliers.end(), std::size_t{0});
  auto subset = [&](const std::vector<std::size_t>& idx) {
    CorrespondenceSet s;
    s.reserve(idx.size());
    for (auto i : idx) s.push_back(cs[i]);
    return s;
  };
  RigidTransform T = kabsch(cs);
  out.diagnostics.inlier_counts.push_back(cs.size());
  for (int it = 0; it < cfg.max_reject_iters; ++it) {
    std::vector<double> res;
    res.reserve(out.inliers.size());
    for (auto i : out.inliers) res.push_back((T(cs[i].source) - cs[i].target).norm());
    const double thr = std::max(cfg.min_abs_residual, cfg.residual_multiplier * detail::median(res));
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < out.inliers.size(); ++k)
      if (res[k] <= thr) kept.push_back(out.inliers[k]);
    if (kept.size() == out.inliers.size()) break;
    if (kept.size() < 3) {
      throw Error(ErrorCode::kConvergenceFailed, "outlier rejection left fewer than 3 correspondences");
    }
    out.inliers = std::move(kept);
    T = kabsch(subset(out.inliers));
    out.diagnostics.inlier_counts.push_back(out.inliers.size());
  }
  double sq = 0.0;
  for (auto i : out.inliers) sq += (T(cs[i].source) - cs[i].target).squaredNorm();
  out.diagnostics.final_rms = std::sqrt(sq / static_cast<double>(out.inliers.size()));
  out.transform = T;
  return out;
}

inline double rotation_angle_deg(const Eigen::Matrix3d& R) {
  const double c = std::clamp((R.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

struct IcpResult {
  RigidTransform transform;
  SolveDiagnostics diagnostics;
};

/// Point-to-point ICP from `initial`. Pairs are nearest target points within
/// icp_max_corr_dist. Returns the iterate with the lowest mean pair residual,
/// so the result is never worse than the initial guess by that measure.
inline IcpResult icp_refine(const PointCloud& source, const SpatialIndex& target_index, const RigidTransform& initial,
                            const SolveConfig& cfg = {}) {
  cfg.validate();
  require_non_empty(source, "icp_refine");
  auto pair_up = [&](const RigidTransform& T, CorrespondenceSet* pairs) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : source.points) {
      const Point3 q = T(p);
      const auto nn = target_index.nearest_within(q, cfg.icp_max_corr_dist);
      if (!nn) continue;
      sum += nn->distance;
      ++n;
      if (pairs) pairs->push_back({q, nn->point, 1.0});
    }
    return std::pair{n, n ? sum / static_cast<double>(n) : 0.0};
  };

  IcpResult out;
  CorrespondenceSet pairs;
  auto [n0, mean0] = pair_up(initial, &pairs);
  if (n0 == 0) {
    throw Error(ErrorCode::kNoCorrespondencesInRange, "no source point has a target neighbour within " +
                                                          std::to_string(cfg.icp_max_corr_dist) + " m");
  }
  out.diagnostics.icp_initial_mean_residual = mean0;
  RigidTransform best = initial, current = initial;
  double best_mean = mean0;
  std::size_t best_pairs = n0;
  for (int it = 0; it < cfg.icp_max_iters; ++it) {
    if (pairs.size() < 3) break;
    RigidTransform step;
    try {
      step = kabsch(pairs);
    } catch (const Error&) {
      break;
    }
    current = step * current;
    ++out.diagnostics.icp_iterations;
    pairs.clear();
    const auto [n, mean] = pair_up(current, &pairs);
    if (n > 0 && mean < best_mean) {
      best = current;
      best_mean = mean;
      best_pairs = n;
    }
    if (step.t.norm() < cfg.icp_convergence_eps_m && rotation_angle_deg(step.R) < cfg.icp_convergence_eps_deg) break;
  }
  out.transform = best;
  out.diagnostics.icp_final_mean_residual = best_mean;
  out.diagnostics.icp_pairs = best_pairs;
  return out;
}

inline IcpResult icp_refine(const PointCloud& source, const PointCloud& target, const RigidTransform& initial,
                            const SolveConfig& cfg = {}) {
  require_non_empty(target, "icp_refine");
  return icp_refine(source, SpatialIndex(target), initial, cfg);
}

}  // namespace mtpcr
