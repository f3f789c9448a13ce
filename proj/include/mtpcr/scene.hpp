#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "json.hpp"
#include "mtpcr/eval.hpp"

namespace mtpcr {

using Vec2 = Eigen::Vector2d;

/// Synthetic urban block: flat ground at z = 0 plus axis-aligned box buildings,
/// seen by an aerial scan (ground and roofs over a coverage polygon) and a
/// terrestrial scan (ground and street-facing facades along a trajectory).
struct SceneSpec {
  double extent_x = 400.0;  // meters, centred on the origin
  double extent_y = 400.0;
  int building_count = 45;
  double footprint_min = 12.0, footprint_max = 40.0;
  double height_min = 6.0, height_max = 35.0;
  double building_gap = 4.0;
  double street_half_width = 8.0;

  double aerial_density = 1.2;          // points / m² of ground or roof
  double aerial_facade_density = 0.05;  // points / m² of facade
  /// Aerial coverage polygon (counter-clockwise). Empty: a west-anchored strip
  /// whose east edge is searched to reach target_overlap.
  std::vector<Vec2> aerial_coverage;

  /// Terrestrial trajectory polyline. Empty: the default street loop.
  std::vector<Vec2> trajectory;
  double sensor_range = 40.0;
  double terrestrial_ground_density = 0.9;
  double terrestrial_facade_density = 1.25;
  double terrestrial_roof_density = 1.25;  // returns on roofs within range

  double noise_sigma = 0.03;
  double target_overlap = 0.20;
  double overlap_tolerance = 0.05;
  double overlap_radius = 1.0;
  std::uint64_t rng_seed = 1;

  void validate() const {
    if (!(extent_x > 0 && extent_y > 0)) throw Error(ErrorCode::kInvalidParameter, "scene extent must be > 0");
    if (!(aerial_density > 0 && terrestrial_ground_density > 0 && terrestrial_facade_density >= 0 &&
          aerial_facade_density >= 0))
      throw Error(ErrorCode::kInvalidParameter, "scan densities must be positive");
    if (!(target_overlap > 0 && target_overlap <= 1))
      throw Error(ErrorCode::kInvalidParameter, "target overlap must lie in (0, 1]");
    if (building_count < 0 || !(footprint_min > 0 && footprint_max >= footprint_min) ||
        !(height_min > 0 && height_max >= height_min))
      throw Error(ErrorCode::kInvalidParameter, "invalid building ranges");
    if (!(sensor_range > 0) || noise_sigma < 0) throw Error(ErrorCode::kInvalidParameter, "invalid sensor parameters");
    if (!aerial_coverage.empty() && aerial_coverage.size() < 3)
      throw Error(ErrorCode::kInvalidParameter, "coverage polygon needs >= 3 vertices");
    if (!trajectory.empty() && trajectory.size() < 2)
      throw Error(ErrorCode::kInvalidParameter, "trajectory needs >= 2 vertices");
  }
};

struct Building {
  Vec2 min, max;
  double height;
};

struct Scene {
  PointCloud aerial;
  PointCloud terrestrial;
  RigidTransform ground_truth;  // aerial -> terrestrial frame (identity)
  std::vector<Building> buildings;
  std::vector<Vec2> aerial_coverage;
  std::vector<Vec2> trajectory;
  OverlapRatio overlap;  // source = aerial, target = terrestrial
  /// Scene overlap ratio: the terrestrial fraction, which can only fall when
  /// the aerial coverage shrinks.
  double realized_overlap = 0.0;
};

namespace detail {

inline bool point_in_polygon(const Vec2& p, const std::vector<Vec2>& poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Vec2 &a = poly[i], &b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y()) && p.x() < (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x())
      inside = !inside;
  }
  return inside;
}

inline double distance_to_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (a + t * ab - p).norm();
}

inline double distance_to_polyline(const Vec2& p, const std::vector<Vec2>& line) {
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < line.size(); ++i) d = std::min(d, distance_to_segment(p, line[i], line[i + 1]));
  return d;
}

inline std::vector<Vec2> default_trajectory(const SceneSpec& s) {
  const double hx = s.extent_x / 2, hy = s.extent_y / 2;
  // Loop through the eastern part with a cross street; the western part is aerial-only.
  return {{-0.2 * hx, -0.7 * hy}, {0.75 * hx, -0.7 * hy}, {0.75 * hx, 0.7 * hy}, {-0.2 * hx, 0.7 * hy},
          {-0.2 * hx, -0.7 * hy}, {-0.2 * hx, 0.0},        {0.75 * hx, 0.0}};
}

inline std::vector<Vec2> strip_coverage(const SceneSpec& s, double east_edge) {
  const double hx = s.extent_x / 2, hy = s.extent_y / 2;
  return {{-hx, -hy}, {east_edge, -hy}, {east_edge, hy}, {-hx, hy}};
}

inline std::vector<Building> place_buildings(const SceneSpec& s, const std::vector<Vec2>& traj, std::mt19937_64& rng) {
  std::vector<Building> out;
  const double hx = s.extent_x / 2, hy = s.extent_y / 2;
  for (int attempt = 0; attempt < 200 * std::max(1, s.building_count) && static_cast<int>(out.size()) < s.building_count;
       ++attempt) {
    const double w = uniform(rng, s.footprint_min, s.footprint_max);
    const double d = uniform(rng, s.footprint_min, s.footprint_max);
    const double h = uniform(rng, s.height_min, s.height_max);
    const Vec2 lo(uniform(rng, -hx + 2, hx - 2 - w), uniform(rng, -hy + 2, hy - 2 - d));
    const Building b{lo, lo + Vec2(w, d), h};
    bool ok = true;
    for (const auto& o : out)
      if (b.min.x() < o.max.x() + s.building_gap && o.min.x() < b.max.x() + s.building_gap &&
          b.min.y() < o.max.y() + s.building_gap && o.min.y() < b.max.y() + s.building_gap) {
        ok = false;
        break;
      }
    // Keep streets clear: sample the footprint boundary and interior.
    for (int a = 0; ok && a <= 8; ++a)
      for (int c = 0; ok && c <= 8; ++c) {
        const Vec2 p = b.min + Vec2(w * a / 8.0, d * c / 8.0);
        if (distance_to_polyline(p, traj) < s.street_half_width) ok = false;
      }
    if (ok) out.push_back(b);
  }
  return out;
}

inline const Building* building_at(const std::vector<Building>& bs, const Vec2& p) {
  for (const auto& b : bs)
    if (p.x() >= b.min.x() && p.x() <= b.max.x() && p.y() >= b.min.y() && p.y() <= b.max.y()) return &b;
  return nullptr;
}

struct Facade {
  Vec2 a, b;      // footprint edge
  Vec2 outward;   // unit normal
  double height;
};

inline std::vector<Facade> facades(const Building& b) {
  const Vec2 p00 = b.min, p10(b.max.x(), b.min.y()), p11 = b.max, p01(b.min.x(), b.max.y());
  return {{p00, p10, {0, -1}, b.height}, {p10, p11, {1, 0}, b.height}, {p11, p01, {0, 1}, b.height},
          {p01, p00, {-1, 0}, b.height}};
}

inline std::size_t poisson_count(double mean, std::mt19937_64& rng) {
  if (mean <= 0) return 0;
  // Rounded mean plus a uniform dither keeps counts deterministic and unbiased.
  return static_cast<std::size_t>(std::floor(mean + uniform01(rng)));
}

inline Point3 jitter(const Point3& p, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return p;
  std::normal_distribution<double> n(0.0, sigma);
  return p + Point3(n(rng), n(rng), n(rng));
}

/// Candidate aerial points over the whole extent; coverage filtering happens later
/// so shrinking the coverage yields a subset.
inline std::vector<Point3> aerial_candidates(const SceneSpec& s, const std::vector<Building>& bs) {
  auto rng = substream(s.rng_seed, 101);
  const double hx = s.extent_x / 2, hy = s.extent_y / 2;
  std::vector<Point3> out;
  const std::size_t n = poisson_count(s.aerial_density * s.extent_x * s.extent_y, rng);
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec2 p(uniform(rng, -hx, hx), uniform(rng, -hy, hy));
    const Building* b = building_at(bs, p);
    out.push_back(jitter(Point3(p.x(), p.y(), b ? b->height : 0.0), s.noise_sigma, rng));
  }
  for (const auto& b : bs)
    for (const auto& f : facades(b)) {
      const double len = (f.b - f.a).norm();
      const std::size_t m = poisson_count(s.aerial_facade_density * len * f.height, rng);
      for (std::size_t k = 0; k < m; ++k) {
        const Vec2 xy = f.a + uniform01(rng) * (f.b - f.a);
        out.push_back(jitter(Point3(xy.x(), xy.y(), uniform(rng, 0.0, f.height)), s.noise_sigma, rng));
      }
    }
  return out;
}

inline PointCloud terrestrial_scan(const SceneSpec& s, const std::vector<Building>& bs, const std::vector<Vec2>& traj) {
  auto rng = substream(s.rng_seed, 202);
  Vec2 lo = traj.front(), hi = traj.front();
  for (const auto& p : traj) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double hx = s.extent_x / 2, hy = s.extent_y / 2;
  lo = (lo.array() - s.sensor_range).max(Eigen::Array2d(-hx, -hy)).matrix();
  hi = (hi.array() + s.sensor_range).min(Eigen::Array2d(hx, hy)).matrix();
  PointCloud cloud;
  cloud.label = SourceLabel::kTerrestrial;
  const Vec2 span = hi - lo;
  const std::size_t n = poisson_count(s.terrestrial_ground_density * span.x() * span.y(), rng);
  for (std::size_t k = 0; k < n; ++k) {
    const Vec2 p(uniform(rng, lo.x(), hi.x()), uniform(rng, lo.y(), hi.y()));
    const Point3 q = jitter(Point3(p.x(), p.y(), 0.0), s.noise_sigma, rng);
    if (distance_to_polyline(p, traj) > s.sensor_range || building_at(bs, p)) continue;
    cloud.points.push_back(q);
  }
  for (const auto& b : bs) {
    const Vec2 span_b = b.max - b.min;
    const std::size_t m = poisson_count(s.terrestrial_roof_density * span_b.x() * span_b.y(), rng);
    for (std::size_t k = 0; k < m; ++k) {
      const Vec2 p(uniform(rng, b.min.x(), b.max.x()), uniform(rng, b.min.y(), b.max.y()));
      const Point3 q = jitter(Point3(p.x(), p.y(), b.height), s.noise_sigma, rng);
      if (distance_to_polyline(p, traj) <= s.sensor_range) cloud.points.push_back(q);
    }
  }
  // Dense trajectory samples for facade visibility.
  std::vector<Vec2> stations;
  for (std::size_t i = 0; i + 1 < traj.size(); ++i) {
    const double len = (traj[i + 1] - traj[i]).norm();
    const int steps = std::max(1, static_cast<int>(std::ceil(len / 2.0)));
    for (int k = 0; k < steps; ++k) stations.push_back(traj[i] + (traj[i + 1] - traj[i]) * (k / double(steps)));
  }
  stations.push_back(traj.back());
  for (const auto& b : bs)
    for (const auto& f : facades(b)) {
      const double len = (f.b - f.a).norm();
      const std::size_t m = poisson_count(s.terrestrial_facade_density * len * f.height, rng);
      std::vector<Vec2> front;
      const Vec2 mid = 0.5 * (f.a + f.b);
      for (const auto& st : stations)
        if ((st - mid).dot(f.outward) > 0 && (st - mid).norm() <= s.sensor_range + 0.5 * len) front.push_back(st);
      for (std::size_t k = 0; k < m; ++k) {
        const Vec2 xy = f.a + uniform01(rng) * (f.b - f.a);
        const Point3 q = jitter(Point3(xy.x(), xy.y(), uniform(rng, 0.0, f.height)), s.noise_sigma, rng);
        bool seen = false;
        for (const auto& st : front)
          if ((st - xy).dot(f.outward) > 0 && (st - xy).norm() <= s.sensor_range) {
            seen = true;
            break;
          }
        if (seen) cloud.points.push_back(q);
      }
    }
  return cloud;
}

inline PointCloud filter_coverage(const std::vector<Point3>& cands, const std::vector<Vec2>& poly) {
  PointCloud out;
  out.label = SourceLabel::kAerial;
  for (const auto& p : cands)
    if (point_in_polygon(Vec2(p.x(), p.y()), poly)) out.points.push_back(p);
  return out;
}

inline double terrestrial_overlap(const PointCloud& terrestrial, const PointCloud& aerial, double radius) {
  if (aerial.empty()) return 0.0;
  const SpatialIndex idx(aerial);
  std::size_t n = 0;
  for (const auto& p : terrestrial.points) n += idx.has_neighbor_within(p, radius);
  return static_cast<double>(n) / static_cast<double>(terrestrial.size());
}

}  // namespace detail

/// Builds the scene. With an empty coverage polygon the aerial strip's east
/// edge is bisected until the terrestrial overlap fraction meets the target.
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.trajectory = spec.trajectory.empty() ? detail::default_trajectory(spec) : spec.trajectory;
  auto rng = substream(spec.rng_seed, 0);
  scene.buildings = detail::place_buildings(spec, scene.trajectory, rng);
  scene.terrestrial = detail::terrestrial_scan(spec, scene.buildings, scene.trajectory);
  if (scene.terrestrial.empty()) throw Error(ErrorCode::kEmptyCloud, "terrestrial scan produced no points");
  const auto cands = detail::aerial_candidates(spec, scene.buildings);

  auto overlap_for = [&](const std::vector<Vec2>& poly, PointCloud& aerial) {
    aerial = detail::filter_coverage(cands, poly);
    return detail::terrestrial_overlap(scene.terrestrial, aerial, spec.overlap_radius);
  };

  double realized = 0.0;
  if (!spec.aerial_coverage.empty()) {
    scene.aerial_coverage = spec.aerial_coverage;
    realized = overlap_for(scene.aerial_coverage, scene.aerial);
  } else {
    const double hx = spec.extent_x / 2;
    double lo = -hx, hi = hx;
    PointCloud best_cloud;
    double best_edge = hi;
    double best = overlap_for(detail::strip_coverage(spec, hi), best_cloud);
    if (best + spec.overlap_tolerance >= spec.target_overlap) {
      for (int it = 0; it < 24; ++it) {
        const double mid = 0.5 * (lo + hi);
        PointCloud cloud;
        const double r = overlap_for(detail::strip_coverage(spec, mid), cloud);
        if (std::abs(r - spec.target_overlap) < std::abs(best - spec.target_overlap) && !cloud.empty()) {
          best = r;
          best_edge = mid;
          best_cloud = std::move(cloud);
        }
        (r < spec.target_overlap ? lo : hi) = mid;
        if (std::abs(best - spec.target_overlap) < 0.005) break;
      }
    }
    scene.aerial_coverage = detail::strip_coverage(spec, best_edge);
    scene.aerial = std::move(best_cloud);
    realized = best;
  }
  if (scene.aerial.empty() || std::abs(realized - spec.target_overlap) > spec.overlap_tolerance) {
    throw Error(ErrorCode::kUnsatisfiableOverlap,
                "realized overlap " + std::to_string(realized) + " cannot meet target " +
                    std::to_string(spec.target_overlap));
  }
  scene.overlap = compute_overlap_ratio(scene.aerial, scene.terrestrial, spec.overlap_radius);
  scene.realized_overlap = scene.overlap.target;
  return scene;
}

inline nlohmann::ordered_json scene_manifest(const Scene& scene, const SceneSpec& spec) {
  auto poly = [](const std::vector<Vec2>& ps) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : ps) arr.push_back({p.x(), p.y()});
    return arr;
  };
  nlohmann::ordered_json j;
  j["schema"] = "mtpcr-scene/1";
  j["seed"] = spec.rng_seed;
  j["aerial_points"] = scene.aerial.size();
  j["terrestrial_points"] = scene.terrestrial.size();
  j["buildings"] = scene.buildings.size();
  j["aerial_coverage"] = poly(scene.aerial_coverage);
  j["trajectory"] = poly(scene.trajectory);
  j["overlap_radius_m"] = spec.overlap_radius;
  j["target_overlap"] = spec.target_overlap;
  j["realized_overlap"] = scene.realized_overlap;
  j["overlap_aerial"] = scene.overlap.source;
  j["overlap_terrestrial"] = scene.overlap.target;
  j["ground_truth"] = transform_to_json(scene.ground_truth);
  return j;
}

}  // namespace mtpcr
