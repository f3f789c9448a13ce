#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace mtpcr {

/// Dense row-major 2D grid; `at(u, v)` addresses column u (x) and row v (y).
template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  bool contains(int u, int v) const { return u >= 0 && v >= 0 && u < width && v < height; }
  T& at(int u, int v) { return data[static_cast<std::size_t>(v) * width + u]; }
  const T& at(int u, int v) const { return data[static_cast<std::size_t>(v) * width + u]; }
  /// Replicate-border access.
  const T& clamped(int u, int v) const {
    return at(std::clamp(u, 0, width - 1), std::clamp(v, 0, height - 1));
  }

  bool operator==(const Grid&) const = default;
};

using ImageU8 = Grid<std::uint8_t>;
using ImageF = Grid<float>;

inline ImageF to_float(const ImageU8& img) {
  ImageF out(img.width, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = static_cast<float>(img.data[i]) / 255.0f;
  return out;
}

inline std::vector<float> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    k[i + radius] = static_cast<float>(w);
    sum += w;
  }
  for (auto& w : k) w = static_cast<float>(w / sum);
  return k;
}

/// Separable Gaussian blur with replicate borders.
inline ImageF gaussian_blur(const ImageF& img, double sigma) {
  if (sigma <= 0.0 || img.empty()) return img;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  ImageF tmp(img.width, img.height), out(img.width, img.height);
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      float s = 0.0f;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img.clamped(u + i, v);
      tmp.at(u, v) = s;
    }
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      float s = 0.0f;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.clamped(u, v + i);
      out.at(u, v) = s;
    }
  return out;
}

/// Bilinear sample at continuous pixel coordinates, replicate borders.
/// Median over a (2r+1)² window with replicate borders.
template <typename T>
Grid<T> median_filter(const Grid<T>& img, int radius) {
  if (radius <= 0) return img;
  Grid<T> out(img.width, img.height);
  std::vector<T> win;
  win.reserve(static_cast<std::size_t>((2 * radius + 1) * (2 * radius + 1)));
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      win.clear();
      for (int dv = -radius; dv <= radius; ++dv)
        for (int du = -radius; du <= radius; ++du) win.push_back(img.clamped(u + du, v + dv));
      auto mid = win.begin() + static_cast<std::ptrdiff_t>(win.size() / 2);
      std::nth_element(win.begin(), mid, win.end());
      out.at(u, v) = *mid;
    }
  return out;
}

inline float sample_bilinear(const ImageF& img, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int u = static_cast<int>(fx), v = static_cast<int>(fy);
  const float ax = static_cast<float>(x - fx), ay = static_cast<float>(y - fy);
  const float a = img.clamped(u, v), b = img.clamped(u + 1, v);
  const float c = img.clamped(u, v + 1), d = img.clamped(u + 1, v + 1);
  return (a * (1 - ax) + b * ax) * (1 - ay) + (c * (1 - ax) + d * ax) * ay;
}

/// Downscale by `factor` >= 1: anti-alias blur then bilinear resample so that
/// output pixel (u, v) sits at input position (u·factor, v·factor).
inline ImageF downscale(const ImageF& img, double factor) {
  if (factor <= 1.0) return img;
  const ImageF blurred = gaussian_blur(img, 0.6 * std::sqrt(factor * factor - 1.0));
  const int w = std::max(1, static_cast<int>(std::floor((img.width - 1) / factor)) + 1);
  const int h = std::max(1, static_cast<int>(std::floor((img.height - 1) / factor)) + 1);
  ImageF out(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) out.at(u, v) = sample_bilinear(blurred, u * factor, v * factor);
  return out;
}

template <typename T>
Grid<T> crop(const Grid<T>& img, int u0, int v0, int w, int h) {
  Grid<T> out(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) out.at(u, v) = img.at(u0 + u, v0 + v);
  return out;
}

}  // namespace mtpcr
