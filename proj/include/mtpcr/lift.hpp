#pragma once

#include <cmath>
#include <vector>

#include "json.hpp"
#include "mtpcr/bev.hpp"
#include "mtpcr/match2d.hpp"

namespace mtpcr {

struct Correspondence3D {
  Point3 source;
  Point3 target;
  double confidence = 1.0;
};

using CorrespondenceSet = std::vector<Correspondence3D>;

enum class HeightRecovery {
  kExact,        // stored H grid
  kDequantized,  // from the 8-bit intensity, as an image-only consumer would
};

namespace detail {

/// Smallest-error Z with fl(Z·res) == h, searched within a few ulps of h/res.
/// H came from fl(z·res), so such a Z always exists nearby.
inline double exact_unscale(double h, double res) {
  const double z0 = h / res;
  if (z0 * res == h) return z0;
  double lo = z0, hi = z0;
  for (int k = 0; k < 8; ++k) {
    lo = std::nextafter(lo, -std::numeric_limits<double>::infinity());
    hi = std::nextafter(hi, std::numeric_limits<double>::infinity());
    if (lo * res == h) return lo;
    if (hi * res == h) return hi;
  }
  return z0;
}

}  // namespace detail

/// Intensity back to scaled height at the centre of its quantization cell
/// (G = 255 only occurs at z_max).
inline double dequantize_height(std::uint8_t g, double z_min, double z_max) {
  if (!(z_max > z_min) || g == 255) return z_max;
  return z_min + (g + 0.5) * (z_max - z_min) / 255.0;
}

/// Keypoint to metric 3D point. X and Y keep the sub-pixel location; Z is
/// read at the nearest pixel.
inline Point3 lift_point(const Keypoint2& kp, const BevRaster& r, HeightRecovery mode = HeightRecovery::kExact) {
  const int i = static_cast<int>(std::lround(kp.u));
  const int j = static_cast<int>(std::lround(kp.v));
  if (!r.occupied(i, j)) {
    throw Error(ErrorCode::kEmptyPixel,
                "keypoint (" + std::to_string(kp.u) + ", " + std::to_string(kp.v) + ") lies on an empty pixel");
  }
  const double x = (kp.u + r.x_min) / r.res;
  const double y = (kp.v + r.y_min) / r.res;
  const double z = mode == HeightRecovery::kExact ? detail::exact_unscale(r.H.at(i, j), r.res)
                                                  : dequantize_height(r.G.at(i, j), r.z_min, r.z_max) / r.res;
  return {x, y, z};
}

/// Lifts both ends of each match; pairs touching an empty pixel are dropped.
inline CorrespondenceSet lift_matches(const MatchSet& ms, const BevRaster& source, const BevRaster& target,
                                      HeightRecovery mode = HeightRecovery::kExact) {
  CorrespondenceSet out;
  out.reserve(ms.size());
  for (const auto& m : ms.pairs) {
    const int si = static_cast<int>(std::lround(m.source.u)), sj = static_cast<int>(std::lround(m.source.v));
    const int ti = static_cast<int>(std::lround(m.target.u)), tj = static_cast<int>(std::lround(m.target.v));
    if (!source.occupied(si, sj) || !target.occupied(ti, tj)) continue;
    Correspondence3D c{lift_point(m.source, source, mode), lift_point(m.target, target, mode), m.confidence};
    if (!is_finite(c.source) || !is_finite(c.target)) continue;
    out.push_back(c);
  }
  if (out.size() < 3) {
    throw Error(ErrorCode::kTooFewCorrespondences,
                std::to_string(out.size()) + " of " + std::to_string(ms.size()) + " matches lifted to 3D (need 3)");
  }
  return out;
}

inline nlohmann::ordered_json correspondences_to_json(const CorrespondenceSet& cs) {
  nlohmann::ordered_json j;
  auto& arr = j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& c : cs)
    arr.push_back({{"src", {c.source.x(), c.source.y(), c.source.z()}},
                   {"tgt", {c.target.x(), c.target.y(), c.target.z()}},
                   {"conf", c.confidence}});
  return j;
}

}  // namespace mtpcr
