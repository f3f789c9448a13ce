#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

#include "mtpcr/cloud.hpp"
#include "mtpcr/grid.hpp"

namespace mtpcr {

/// Top-down raster of a scaled cloud: G holds 8-bit height intensity, H the
/// maximum scaled height per pixel (NaN where no point fell).
struct BevRaster {
  int width = 0;
  int height = 0;
  ImageU8 G;
  Grid<double> H;
  double res = 1.0;
  double x_min = 0.0;  // scaled units (meters × res)
  double y_min = 0.0;
  double z_min = 0.0;
  double z_max = 0.0;

  bool occupied(int u, int v) const { return H.contains(u, v) && !std::isnan(H.at(u, v)); }
};

/// Largest raster (pixels) rasterize() will allocate.
inline constexpr std::int64_t kMaxRasterPixels = std::int64_t{1} << 26;

/// Points per unit area times gamma; used as the metric-to-pixel scale.
inline double compute_resolution(const PointCloud& cloud, double gamma) {
  require_non_empty(cloud, "compute_resolution");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw Error(ErrorCode::kInvalidParameter, "gamma must be > 0");
  const auto ext = bounds(cloud).extent();
  if (!(ext.x() > 0.0) || !(ext.y() > 0.0)) {
    throw Error(ErrorCode::kDegenerateExtent, "cloud has zero x or y extent");
  }
  return static_cast<double>(cloud.size()) * gamma / (ext.x() * ext.y());
}

inline PointCloud scale_cloud(const PointCloud& cloud, double res) {
  if (!(res > 0.0) || !std::isfinite(res)) throw Error(ErrorCode::kInvalidParameter, "res must be > 0");
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(p * res);
  return out;
}

/// Bucket index ceil(offset). Offsets within kBucketEps above an integer stay
/// in the lower bucket, so a lifted point re-rasterizes into its own pixel.
inline constexpr double kBucketEps = 1e-9;

inline int bucket_index(double offset) {
  return static_cast<int>(std::ceil(offset - kBucketEps));
}

/// Height to 8-bit intensity. A degenerate range maps occupied pixels to 255.
inline std::uint8_t quantize_height(double h, double z_min, double z_max) {
  if (!(z_max > z_min)) return 255;
  const double q = std::floor(255.0 * (h - z_min) / (z_max - z_min));
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline BevRaster rasterize(const PointCloud& scaled, double res = 1.0) {
  require_non_empty(scaled, "rasterize");
  const Bounds3 b = bounds(scaled);
  const double wx = std::ceil(b.max.x() - b.min.x()) + 1.0;
  const double wy = std::ceil(b.max.y() - b.min.y()) + 1.0;
  if (wx * wy > static_cast<double>(kMaxRasterPixels)) {
    throw Error(ErrorCode::kInvalidParameter,
                "raster of " + std::to_string(static_cast<long long>(wx)) + "x" +
                    std::to_string(static_cast<long long>(wy)) + " pixels exceeds the size limit (lower gamma)");
  }
  BevRaster r;
  r.width = static_cast<int>(wx);
  r.height = static_cast<int>(wy);
  r.res = res;
  r.x_min = b.min.x();
  r.y_min = b.min.y();
  r.z_min = b.min.z();
  r.z_max = b.max.z();
  r.H = Grid<double>(r.width, r.height, std::numeric_limits<double>::quiet_NaN());
  r.G = ImageU8(r.width, r.height, 0);
  for (const auto& p : scaled.points) {
    const int i = std::clamp(bucket_index(p.x() - r.x_min), 0, r.width - 1);
    const int j = std::clamp(bucket_index(p.y() - r.y_min), 0, r.height - 1);
    double& h = r.H.at(i, j);
    if (std::isnan(h) || p.z() > h) h = p.z();
  }
  for (int j = 0; j < r.height; ++j)
    for (int i = 0; i < r.width; ++i)
      if (r.occupied(i, j)) r.G.at(i, j) = quantize_height(r.H.at(i, j), r.z_min, r.z_max);
  return r;
}

using Kernel3 = std::array<std::array<int, 3>, 3>;

/// Edge-extraction then sharpening kernels of the enhancement stage.
struct EnhanceKernels {
  static constexpr Kernel3 w1{{{-2, -2, -2}, {-2, 32, -2}, {-2, -2, -2}}};
  static constexpr Kernel3 w2{{{-1, -1, -1}, {-1, 10, -1}, {-1, -1, -1}}};
};

/// 3×3 convolution with replicate borders, clamped to [0, 255]. Both kernels
/// are symmetric so correlation and convolution coincide.
inline ImageU8 convolve_clamped(const ImageU8& img, const Kernel3& k) {
  ImageU8 out(img.width, img.height);
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      int acc = 0;
      for (int dv = -1; dv <= 1; ++dv)
        for (int du = -1; du <= 1; ++du) acc += k[dv + 1][du + 1] * img.clamped(u + du, v + dv);
      out.at(u, v) = static_cast<std::uint8_t>(std::clamp(acc, 0, 255));
    }
  return out;
}

inline ImageU8 enhance(const ImageU8& g) {
  if (g.empty()) throw Error(ErrorCode::kInvalidParameter, "enhance: empty image");
  return convolve_clamped(convolve_clamped(g, EnhanceKernels::w1), EnhanceKernels::w2);
}

}  // namespace mtpcr
