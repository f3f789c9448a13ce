#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "mtpcr/cloud.hpp"

namespace mtpcr {

struct NearestResult {
  Point3 point;
  double distance = std::numeric_limits<double>::infinity();
  std::size_t index = 0;
};

/// Exact nearest-neighbour search over a fixed point set (static kd-tree,
/// median splits on the widest axis). Read-only after construction.
class SpatialIndex {
 public:
  SpatialIndex() = default;

  explicit SpatialIndex(const PointCloud& cloud) : points_(cloud.points) {
    require_non_empty(cloud, "SpatialIndex");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::uint32_t{0});
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, static_cast<std::uint32_t>(order_.size()));
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Point3>& points() const { return points_; }

  NearestResult nearest(const Point3& q) const {
    NearestResult best;
    double best_sq = std::numeric_limits<double>::infinity();
    search(0, q, best_sq, best.index);
    best.point = points_[best.index];
    best.distance = std::sqrt(best_sq);
    return best;
  }

  /// Nearest point if it lies within `radius`, otherwise nothing.
  std::optional<NearestResult> nearest_within(const Point3& q, double radius) const {
    double best_sq = radius * radius;
    std::size_t idx = std::numeric_limits<std::size_t>::max();
    search(0, q, best_sq, idx);
    if (idx == std::numeric_limits<std::size_t>::max()) return std::nullopt;
    return NearestResult{points_[idx], std::sqrt(best_sq), idx};
  }

  bool has_neighbor_within(const Point3& q, double radius) const {
    return nearest_within(q, radius).has_value();
  }

 private:
  static constexpr std::uint32_t kLeafSize = 12;

  struct Node {
    std::uint32_t begin, end;
    std::uint32_t left = 0, right = 0;  // 0 marks a leaf (root is never a child)
    int axis = -1;
    double split = 0.0;
  };

  std::uint32_t build(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::uint32_t>(nodes_.size());
    nodes_.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;
    Bounds3 b;
    for (std::uint32_t i = begin; i < end; ++i) b.extend(points_[order_[i]]);
    int axis = 0;
    b.extent().maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t c) { return points_[a][axis] < points_[c][axis]; });
    const double split = points_[order_[mid]][axis];
    const auto left = build(begin, mid);
    const auto right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(std::uint32_t id, const Point3& q, double& best_sq, std::size_t& best_idx) const {
    const Node& n = nodes_[id];
    if (n.left == 0) {
      for (std::uint32_t i = n.begin; i < n.end; ++i) {
        const std::uint32_t pi = order_[i];
        const double d = (points_[pi] - q).squaredNorm();
        // Ties resolve to the lowest point index for determinism.
        if (d < best_sq || (d == best_sq && pi < best_idx)) {
          best_sq = d;
          best_idx = pi;
        }
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const auto near = diff < 0 ? n.left : n.right;
    const auto far = diff < 0 ? n.right : n.left;
    search(near, q, best_sq, best_idx);
    if (diff * diff <= best_sq) search(far, q, best_sq, best_idx);
  }

  std::vector<Point3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

inline NearestResult nearest(const SpatialIndex& index, const Point3& q) { return index.nearest(q); }

}  // namespace mtpcr
