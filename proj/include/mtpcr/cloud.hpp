#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtpcr/error.hpp"

namespace mtpcr {

using Point3 = Eigen::Vector3d;

enum class SourceLabel { kUnknown, kAerial, kTerrestrial };

inline std::string_view to_string(SourceLabel label) {
  switch (label) {
    case SourceLabel::kAerial: return "aerial";
    case SourceLabel::kTerrestrial: return "terrestrial";
    default: return "unknown";
  }
}

inline bool is_finite(const Point3& p) {
  return std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z());
}

/// Ordered list of 3D points in meters.
struct PointCloud {
  std::vector<Point3> points;
  SourceLabel label = SourceLabel::kUnknown;

  PointCloud() = default;
  explicit PointCloud(std::vector<Point3> pts, SourceLabel l = SourceLabel::kUnknown)
      : points(std::move(pts)), label(l) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  const Point3& operator[](std::size_t i) const { return points[i]; }
};

struct Bounds3 {
  Point3 min = Point3::Constant(std::numeric_limits<double>::infinity());
  Point3 max = Point3::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Point3& p) {
    min = min.cwiseMin(p);
    max = max.cwiseMax(p);
  }
  Point3 extent() const { return max - min; }
};

inline Bounds3 bounds(const PointCloud& cloud) {
  Bounds3 b;
  for (const auto& p : cloud.points) b.extend(p);
  return b;
}

inline void require_non_empty(const PointCloud& cloud, std::string_view what) {
  if (cloud.empty()) throw Error(ErrorCode::kEmptyCloud, std::string(what) + ": cloud has no points");
}

/// Rigid motion p -> R p + t.
struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from(const Eigen::Matrix3d& rot, const Eigen::Vector3d& trans) {
    RigidTransform out;
    out.R = rot;
    out.t = trans;
    return out;
  }

  Point3 operator()(const Point3& p) const { return R * p + t; }

  /// Composition: (a * b)(p) == a(b(p)).
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    return from(a.R * b.R, a.R * b.t + a.t);
  }

  RigidTransform inverse() const { return from(R.transpose(), -(R.transpose() * t)); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = R;
    m.topRightCorner<3, 1>() = t;
    return m;
  }

  /// RᵀR = I and det(R) = +1 within `tol`.
  bool is_valid(double tol = 1e-9) const {
    if (!R.allFinite() || !t.allFinite()) return false;
    return (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(R.determinant() - 1.0) <= tol;
  }
};

inline RigidTransform compose(const RigidTransform& second, const RigidTransform& first) {
  return second * first;
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& T) {
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(T.R * p + T.t);
  return out;
}

namespace detail {

struct VoxelKey {
  std::int64_t x, y, z;
  bool operator==(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(k.x) * 73856093ULL;
    h ^= static_cast<std::uint64_t>(k.y) * 19349663ULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(k.z) * 83492791ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

}  // namespace detail

/// One centroid per occupied voxel cell. Output order follows the first
/// occurrence of each cell in the input, so results are deterministic.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0) || !std::isfinite(voxel)) {
    throw Error(ErrorCode::kInvalidParameter, "voxel size must be positive");
  }
  struct Acc {
    Point3 sum = Point3::Zero();
    std::size_t count = 0;
  };
  std::unordered_map<detail::VoxelKey, std::size_t, detail::VoxelKeyHash> slot;
  slot.reserve(cloud.size());
  std::vector<Acc> acc;
  for (const auto& p : cloud.points) {
    const detail::VoxelKey key{static_cast<std::int64_t>(std::floor(p.x() / voxel)),
                               static_cast<std::int64_t>(std::floor(p.y() / voxel)),
                               static_cast<std::int64_t>(std::floor(p.z() / voxel))};
    auto [it, inserted] = slot.try_emplace(key, acc.size());
    if (inserted) acc.emplace_back();
    acc[it->second].sum += p;
    ++acc[it->second].count;
  }
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(acc.size());
  for (const auto& a : acc) out.points.push_back(a.sum / static_cast<double>(a.count));
  return out;
}

}  // namespace mtpcr
