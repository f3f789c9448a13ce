#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <utility>

#include "mtpcr/cloud.hpp"
#include "mtpcr/random.hpp"

namespace mtpcr {

/// Plane {p : normal·p + d = 0} with a unit normal canonicalized to normal.z >= 0.
struct Plane {
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double d = 0.0;

  double signed_distance(const Point3& p) const { return normal.dot(p) + d; }

  /// Unit-normalizes and flips so that normal.z >= 0.
  static Plane canonical(Eigen::Vector3d n, double d) {
    const double len = n.norm();
    n /= len;
    d /= len;
    if (n.z() < 0.0) {
      n = -n;
      d = -d;
    }
    return Plane{n, d};
  }
};

struct RansacConfig {
  int iterations = 2000;
  double inlier_threshold = 0.2;  // meters
  double min_inlier_fraction = 0.15;
  std::uint64_t rng_seed = 42;
  /// Hypotheses are scored on at most this many points (fixed stride subset);
  /// the final inlier count always uses the full cloud.
  std::size_t max_scoring_points = 20000;
  /// Preferred ground candidates have normals within this angle of ±e_z.
  double max_ground_tilt_deg = 45.0;

  void validate() const {
    if (iterations < 1) throw Error(ErrorCode::kInvalidParameter, "ransac iterations must be >= 1");
    if (!(inlier_threshold > 0.0)) throw Error(ErrorCode::kInvalidParameter, "ransac inlier threshold must be > 0");
    if (!(min_inlier_fraction > 0.0 && min_inlier_fraction <= 1.0))
      throw Error(ErrorCode::kInvalidParameter, "min_inlier_fraction must lie in (0, 1]");
  }
};

struct GroundFit {
  Plane plane;
  std::size_t inlier_count = 0;
};

/// Total-least-squares plane through `pts` (smallest covariance eigenvector).
template <typename Range>
std::optional<Plane> fit_plane_tls(const Range& pts) {
  Point3 mean = Point3::Zero();
  std::size_t count = 0;
  for (const Point3& p : pts) {
    mean += p;
    ++count;
  }
  if (count < 3) return std::nullopt;
  mean /= static_cast<double>(count);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const Point3& p : pts) {
    const Point3 c = p - mean;
    cov += c * c.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  if (es.info() != Eigen::Success) return std::nullopt;
  const Eigen::Vector3d n = es.eigenvectors().col(0);
  if (!n.allFinite() || n.norm() < 0.5) return std::nullopt;
  // Collinear or coincident points leave the plane undetermined.
  if (es.eigenvalues()(1) <= 1e-12 * std::max(es.eigenvalues()(2), 1e-300)) return std::nullopt;
  return Plane::canonical(n, -n.dot(mean));
}

namespace detail {

inline std::size_t count_inliers(const std::vector<Point3>& pts, const Plane& plane, double thr) {
  std::size_t c = 0;
  for (const auto& p : pts) c += std::abs(plane.signed_distance(p)) <= thr;
  return c;
}

inline std::vector<Point3> collect_inliers(const std::vector<Point3>& pts, const Plane& plane, double thr) {
  std::vector<Point3> out;
  for (const auto& p : pts)
    if (std::abs(plane.signed_distance(p)) <= thr) out.push_back(p);
  return out;
}

}  // namespace detail

/// RANSAC ground plane. Among hypotheses reaching the consensus fraction,
/// those whose normal is within max_ground_tilt_deg of ±e_z win over steeper
/// ones (facades); ties in that class go to the larger inlier count. The
/// winner is refit by total least squares over its inliers.
inline GroundFit fit_ground_plane(const PointCloud& cloud, const RansacConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = cloud.size();
  if (n < 3) throw Error(ErrorCode::kInsufficientPoints, "ground fit needs at least 3 points");

  std::vector<Point3> scoring;
  if (n <= cfg.max_scoring_points) {
    scoring = cloud.points;
  } else {
    const double stride = static_cast<double>(n) / static_cast<double>(cfg.max_scoring_points);
    scoring.reserve(cfg.max_scoring_points);
    for (std::size_t k = 0; k < cfg.max_scoring_points; ++k)
      scoring.push_back(cloud.points[static_cast<std::size_t>(static_cast<double>(k) * stride)]);
  }
  const std::size_t m = scoring.size();
  const auto min_scoring = static_cast<std::size_t>(std::ceil(cfg.min_inlier_fraction * static_cast<double>(m)));
  const double cos_tilt = std::cos(cfg.max_ground_tilt_deg * std::numbers::pi / 180.0);

  struct Best {
    Plane plane;
    std::size_t count = 0;
    bool valid = false;
  } best_flat, best_any;

  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = substream(cfg.rng_seed, static_cast<std::uint64_t>(it));
    const std::size_t a = rng() % m, b = rng() % m, c = rng() % m;
    if (a == b || b == c || a == c) continue;
    const Eigen::Vector3d nrm = (scoring[b] - scoring[a]).cross(scoring[c] - scoring[a]);
    if (nrm.norm() < 1e-12) continue;
    const Plane plane = Plane::canonical(nrm, -nrm.dot(scoring[a]) );
    const std::size_t count = detail::count_inliers(scoring, plane, cfg.inlier_threshold);
    if (count < min_scoring) continue;
    if (!best_any.valid || count > best_any.count) best_any = {plane, count, true};
    if (plane.normal.z() >= cos_tilt && (!best_flat.valid || count > best_flat.count))
      best_flat = {plane, count, true};
  }
  const Best& chosen = best_flat.valid ? best_flat : best_any;
  if (!chosen.valid) throw Error(ErrorCode::kNoConsensus, "no plane reached the minimum inlier fraction");

  Plane plane = chosen.plane;
  for (int refit = 0; refit < 2; ++refit) {
    const auto inliers = detail::collect_inliers(cloud.points, plane, cfg.inlier_threshold);
    auto refined = fit_plane_tls(inliers);
    if (!refined) break;
    plane = *refined;
  }
  const std::size_t count = detail::count_inliers(cloud.points, plane, cfg.inlier_threshold);
  if (static_cast<double>(count) < cfg.min_inlier_fraction * static_cast<double>(n)) {
    throw Error(ErrorCode::kNoConsensus, "refit plane fell below the minimum inlier fraction");
  }
  return GroundFit{plane, count};
}

/// Minimal rotation taking unit vector `n` onto e_z. Antiparallel input turns
/// 180° about e_x.
inline Eigen::Matrix3d rotation_to_z(const Eigen::Vector3d& n) {
  const Eigen::Vector3d ez = Eigen::Vector3d::UnitZ();
  if ((n - ez).norm() <= 1e-9) return Eigen::Matrix3d::Identity();
  if ((n + ez).norm() <= 1e-9) return Eigen::AngleAxisd(std::numbers::pi, Eigen::Vector3d::UnitX()).toRotationMatrix();
  const Eigen::Vector3d axis = n.cross(ez).normalized();
  const double angle = std::acos(std::clamp(n.dot(ez), -1.0, 1.0));
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

struct Alignment {
  PointCloud cloud;
  RigidTransform transform;
};

/// Rotates the cloud so the (canonicalized) plane normal becomes +e_z.
inline Alignment align_to_xoy(const PointCloud& cloud, const Plane& plane) {
  const Plane p = Plane::canonical(plane.normal, plane.d);
  const auto T = RigidTransform::from(rotation_to_z(p.normal), Eigen::Vector3d::Zero());
  return Alignment{apply_transform(cloud, T), T};
}

namespace detail {

inline double cross2(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

/// Convex hull (counter-clockwise, no collinear points) by the monotone chain.
inline std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Eigen::Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

}  // namespace detail

/// Rotation about z aligning the cloud's minimum-area bounding rectangle with
/// the axes, long side along x, so axis-aligned extents no longer depend on
/// the input heading.
inline RigidTransform principal_yaw(const PointCloud& cloud) {
  require_non_empty(cloud, "principal_yaw");
  std::vector<Eigen::Vector2d> xy;
  xy.reserve(cloud.size());
  for (const auto& p : cloud.points) xy.push_back(p.head<2>());
  const auto hull = detail::convex_hull(std::move(xy));
  if (hull.size() < 3) return RigidTransform::identity();
  double best_area = std::numeric_limits<double>::infinity(), best_angle = 0.0;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const Eigen::Vector2d e = hull[(i + 1) % hull.size()] - hull[i];
    if (e.norm() == 0.0) continue;
    const Eigen::Vector2d ux = e.normalized(), uy(-ux.y(), ux.x());
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& p : hull) {
      const double a = p.dot(ux), b = p.dot(uy);
      x0 = std::min(x0, a);
      x1 = std::max(x1, a);
      y0 = std::min(y0, b);
      y1 = std::max(y1, b);
    }
    const double area = (x1 - x0) * (y1 - y0);
    if (area < best_area) {
      best_area = area;
      best_angle = std::atan2(ux.y(), ux.x()) + ((x1 - x0) < (y1 - y0) ? std::numbers::pi / 2 : 0.0);
    }
  }
  // Fold the heading into (-pi/2, pi/2]; the 180° ambiguity of a rectangle stays.
  best_angle = std::remainder(best_angle, std::numbers::pi);
  return RigidTransform::from(Eigen::AngleAxisd(-best_angle, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
                              Eigen::Vector3d::Zero());
}

}  // namespace mtpcr
