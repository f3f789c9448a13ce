#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <numbers>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mtpcr/grid.hpp"
#include "mtpcr/image_io.hpp"

namespace mtpcr {

/// Sub-pixel image location; u is the column (x), v the row (y).
struct Keypoint2 {
  double u = 0.0;
  double v = 0.0;
  double score = 0.0;
};

inline constexpr int kPatchSide = 16;
inline constexpr int kDescriptorSize = kPatchSide * kPatchSide;

/// Keypoint plus the pyramid scale, orientation and unit-norm descriptor it was described with.
struct Feature {
  Keypoint2 kp;
  double scale = 1.0;
  double angle = 0.0;  // radians
  std::array<float, kDescriptorSize> descriptor{};
  /// Highest elevation near the keypoint and its span over the same window,
  /// meters; NaN without elevation data.
  double height = std::numeric_limits<double>::quiet_NaN();
  double relief = std::numeric_limits<double>::quiet_NaN();
};

/// Per-pixel elevation in meters (NaN where empty), aligned with an image.
using Elevation = Grid<double>;

struct Match {
  Keypoint2 source;
  Keypoint2 target;
  double confidence = 0.0;
};

/// Paired keypoints; each source keypoint appears at most once.
struct MatchSet {
  std::vector<Match> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

enum class MatcherBackend { kBuiltin, kExternal };

struct MatcherConfig {
  MatcherBackend backend = MatcherBackend::kBuiltin;
  /// Command template for the external backend; {imgA} {imgB} {out} are substituted.
  std::string external_command;
  /// Scratch directory root for external invocations (system temp when empty).
  std::filesystem::path work_dir;

  int max_keypoints = 4096;
  double ratio_threshold = 0.85;
  double focus_threshold = 0.3;  // θ
  int focus_margin = 32;         // pixels
  bool focus_enabled = true;

  // Harris detector
  int median_radius = 1;  // median prefilter against speckle and holes; 0 disables
  double pre_blur = 1.0;  // Gaussian σ applied to the input; 0 disables
  double harris_k = 0.04;
  double harris_sigma = 1.5;
  int nms_radius = 4;
  double relative_response = 0.01;  // fraction of the strongest response
  int border = 2;

  // Scale pyramid: level l is the input downscaled by scale_step^l.
  int scale_levels = 7;
  double scale_step = 1.2599210498948732;  // 2^(1/3)

  // Descriptor
  double patch_step = 1.5;  // sample spacing in level pixels
  double descriptor_blur = 1.0;
  double orientation_radius = 8.0;
  /// Secondary orientation peaks at least this fraction of the strongest get their own descriptor.
  double orientation_peak_ratio = 0.8;
  int max_orientations = 2;

  /// Second-nearest candidates closer than this to the nearest one (in image
  /// pixels) are the same structure at another scale and do not count for
  /// the ratio test.
  double ratio_exclusion_px = 6.0;

  // Geometric consistency: matches must agree on one 2D similarity. Candidates
  // are the mutual matches plus each keypoint's `candidate_k` most similar
  // partners in either direction.
  bool geometric_check = true;
  int candidate_k = 3;
  double geometric_tolerance = 3.0;  // pixels
  double max_scale_ratio = 6.0;
  /// Known image-B-per-image-A scale (the ratio of the raster resolutions);
  /// 0 leaves the scale free within max_scale_ratio.
  double expected_scale = 0.0;
  double scale_tolerance = 0.15;  // relative
  double orientation_tolerance_deg = 30.0;
  double hypothesis_min_separation = 12.0;  // pixels, in both images
  double hypothesis_max_separation = 120.0;
  int hypothesis_bins_evaluated = 64;
  int min_geometric_inliers = 5;
  double support_cell = 8.0;  // pixels

  // Elevation cues, used when elevation grids accompany the images. Matched
  // keypoints must agree on one vertical offset, and candidates with similar
  // local relief rank higher.
  int height_radius = 3;           // pixels
  double height_tolerance = 1.0;   // meters; 0 disables the offset check
  double relief_weight = 0.05;     // similarity penalty per meter of relief difference
  double relief_cap = 10.0;        // meters
  /// When both elevation grids share a datum, pairs whose local heights
  /// differ by more than this never become candidates (meters; 0 disables).
  double max_height_offset = 0.0;

  void validate() const {
    if (max_keypoints < 1) throw Error(ErrorCode::kInvalidParameter, "max_keypoints must be >= 1");
    if (!(ratio_threshold > 0.0 && ratio_threshold <= 1.0))
      throw Error(ErrorCode::kInvalidParameter, "ratio_threshold must lie in (0, 1]");
    if (!(focus_threshold > 0.0 && focus_threshold <= 1.0))
      throw Error(ErrorCode::kInvalidParameter, "focus_threshold must lie in (0, 1]");
    if (focus_margin < 0) throw Error(ErrorCode::kInvalidParameter, "focus_margin must be >= 0");
    if (max_orientations < 1 || !(orientation_peak_ratio > 0.0 && orientation_peak_ratio <= 1.0))
      throw Error(ErrorCode::kInvalidParameter, "orientation peaks need max_orientations >= 1 and ratio in (0, 1]");
    if (expected_scale < 0.0 || !(scale_tolerance > 0.0))
      throw Error(ErrorCode::kInvalidParameter, "expected_scale must be >= 0 and scale_tolerance > 0");
    if (candidate_k < 1 || min_geometric_inliers < 2 || !(geometric_tolerance > 0.0) || !(max_scale_ratio >= 1.0))
      throw Error(ErrorCode::kInvalidParameter, "invalid geometric check parameters");
    if (!(hypothesis_min_separation >= 0.0 && hypothesis_max_separation > hypothesis_min_separation) ||
        hypothesis_bins_evaluated < 1)
      throw Error(ErrorCode::kInvalidParameter, "invalid hypothesis parameters");
    if (height_radius < 0 || height_tolerance < 0.0 || relief_weight < 0.0 || !(relief_cap > 0.0) ||
        max_height_offset < 0.0)
      throw Error(ErrorCode::kInvalidParameter, "invalid elevation parameters");
    if (scale_levels < 1 || !(scale_step > 1.0))
      throw Error(ErrorCode::kInvalidParameter, "scale pyramid needs >= 1 level and step > 1");
    if (backend == MatcherBackend::kExternal && external_command.empty())
      throw Error(ErrorCode::kInvalidParameter, "external matcher selected without a command");
  }
};

namespace detail {

struct Candidate {
  double response;
  double x, y;  // level coordinates
  int level;
};

inline ImageF harris_response(const ImageF& img, double sigma, double k) {
  const int w = img.width, h = img.height;
  ImageF ixx(w, h), iyy(w, h), ixy(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const float gx = (img.clamped(u + 1, v - 1) + 2 * img.clamped(u + 1, v) + img.clamped(u + 1, v + 1) -
                        img.clamped(u - 1, v - 1) - 2 * img.clamped(u - 1, v) - img.clamped(u - 1, v + 1)) /
                       8.0f;
      const float gy = (img.clamped(u - 1, v + 1) + 2 * img.clamped(u, v + 1) + img.clamped(u + 1, v + 1) -
                        img.clamped(u - 1, v - 1) - 2 * img.clamped(u, v - 1) - img.clamped(u + 1, v - 1)) /
                       8.0f;
      ixx.at(u, v) = gx * gx;
      iyy.at(u, v) = gy * gy;
      ixy.at(u, v) = gx * gy;
    }
  ixx = gaussian_blur(ixx, sigma);
  iyy = gaussian_blur(iyy, sigma);
  ixy = gaussian_blur(ixy, sigma);
  ImageF r(w, h);
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const double a = ixx.data[i], b = iyy.data[i], c = ixy.data[i];
    r.data[i] = static_cast<float>(a * b - c * c - k * (a + b) * (a + b));
  }
  return r;
}

/// Strict local maximum over a (2r+1)² window; plateaus keep their first pixel in raster order.
inline bool is_local_max(const ImageF& r, int u, int v, int radius) {
  const float c = r.at(u, v);
  for (int dv = -radius; dv <= radius; ++dv)
    for (int du = -radius; du <= radius; ++du) {
      if (du == 0 && dv == 0) continue;
      const int x = u + du, y = v + dv;
      if (!r.contains(x, y)) continue;
      const float o = r.at(x, y);
      const bool earlier = dv < 0 || (dv == 0 && du < 0);
      if (o > c || (earlier && o == c)) return false;
    }
  return true;
}

inline double parabolic_offset(double left, double centre, double right) {
  const double denom = left - 2.0 * centre + right;
  if (std::abs(denom) < 1e-20) return 0.0;
  return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

/// Orientations of the gradient-histogram peaks within `peak_ratio` of the
/// strongest one, strongest first, at most `max_count`.
inline std::vector<double> dominant_orientations(const ImageF& img, double x, double y, double radius,
                                                 double peak_ratio, int max_count) {
  constexpr int kBins = 36;
  std::array<double, kBins> hist{};
  const int r = static_cast<int>(std::ceil(radius));
  const double sigma = radius / 2.0;
  const int cu = static_cast<int>(std::lround(x)), cv = static_cast<int>(std::lround(y));
  for (int dv = -r; dv <= r; ++dv)
    for (int du = -r; du <= r; ++du) {
      if (du * du + dv * dv > r * r) continue;
      const int u = cu + du, v = cv + dv;
      const double gx = img.clamped(u + 1, v) - img.clamped(u - 1, v);
      const double gy = img.clamped(u, v + 1) - img.clamped(u, v - 1);
      const double mag = std::hypot(gx, gy);
      if (mag <= 0.0) continue;
      const double wgt = std::exp(-0.5 * (du * du + dv * dv) / (sigma * sigma));
      double ang = std::atan2(gy, gx);
      if (ang < 0) ang += 2 * std::numbers::pi;
      const int bin = static_cast<int>(ang / (2 * std::numbers::pi) * kBins) % kBins;
      hist[bin] += wgt * mag;
    }
  std::array<double, kBins> smooth{};
  for (int i = 0; i < kBins; ++i)
    smooth[i] = 0.25 * hist[(i + kBins - 1) % kBins] + 0.5 * hist[i] + 0.25 * hist[(i + 1) % kBins];
  const double top = *std::max_element(smooth.begin(), smooth.end());
  std::vector<std::pair<double, int>> peaks;
  for (int i = 0; i < kBins; ++i) {
    const double prev = smooth[(i + kBins - 1) % kBins], next = smooth[(i + 1) % kBins];
    if (smooth[i] > prev && smooth[i] >= next && smooth[i] >= peak_ratio * top) peaks.push_back({smooth[i], i});
  }
  if (peaks.empty()) peaks.push_back({top, 0});
  std::stable_sort(peaks.begin(), peaks.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> out;
  for (const auto& [val, peak] : peaks) {
    if (static_cast<int>(out.size()) >= max_count) break;
    const double off =
        parabolic_offset(smooth[(peak + kBins - 1) % kBins], smooth[peak], smooth[(peak + 1) % kBins]);
    out.push_back((peak + 0.5 + off) * 2 * std::numbers::pi / kBins);
  }
  return out;
}

/// Rotated 16×16 patch, mean-subtracted and L2-normalized. False when the patch is flat.
inline bool describe(const ImageF& img, double x, double y, double angle, double step,
                     std::array<float, kDescriptorSize>& out) {
  const double c = std::cos(angle), s = std::sin(angle);
  double mean = 0.0;
  for (int b = 0; b < kPatchSide; ++b)
    for (int a = 0; a < kPatchSide; ++a) {
      const double dx = (a - 7.5) * step, dy = (b - 7.5) * step;
      const float val = sample_bilinear(img, x + c * dx - s * dy, y + s * dx + c * dy);
      out[b * kPatchSide + a] = val;
      mean += val;
    }
  mean /= kDescriptorSize;
  double norm = 0.0;
  for (auto& val : out) {
    val = static_cast<float>(val - mean);
    norm += static_cast<double>(val) * val;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-6) return false;
  for (auto& val : out) val = static_cast<float>(val / norm);
  return true;
}

/// Highest elevation and its span over the valid pixels within `radius`.
inline void local_elevation(const Elevation& e, Feature& f, int radius) {
  const int cu = static_cast<int>(std::lround(f.kp.u)), cv = static_cast<int>(std::lround(f.kp.v));
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int v = cv - radius; v <= cv + radius; ++v)
    for (int u = cu - radius; u <= cu + radius; ++u) {
      if (!e.contains(u, v) || std::isnan(e.at(u, v))) continue;
      lo = std::min(lo, e.at(u, v));
      hi = std::max(hi, e.at(u, v));
    }
  if (hi < lo) return;
  f.height = hi;
  f.relief = hi - lo;
}

}  // namespace detail

/// Multi-scale Harris corners with oriented patch descriptors, strongest first.
inline std::vector<Feature> detect_keypoints(const ImageU8& image, const MatcherConfig& cfg = {},
                                             const Elevation* elevation = nullptr) {
  cfg.validate();
  if (image.empty()) throw Error(ErrorCode::kInvalidParameter, "detect_keypoints: empty image");
  if (elevation && (elevation->width != image.width || elevation->height != image.height))
    throw Error(ErrorCode::kInvalidParameter, "detect_keypoints: elevation grid does not match the image");
  const ImageF filtered = to_float(median_filter(image, cfg.median_radius));
  const ImageF base = cfg.pre_blur > 0 ? gaussian_blur(filtered, cfg.pre_blur) : filtered;

  struct Level {
    double scale;
    ImageF img;
    ImageF described;
  };
  std::vector<Level> levels;
  std::vector<detail::Candidate> cands;
  float max_response = 0.0f;
  for (int l = 0; l < cfg.scale_levels; ++l) {
    const double scale = std::pow(cfg.scale_step, l);
    ImageF img = l == 0 ? base : downscale(base, scale);
    if (img.width < 2 * cfg.border + 3 || img.height < 2 * cfg.border + 3) break;
    const ImageF r = detail::harris_response(img, cfg.harris_sigma, cfg.harris_k);
    for (int v = cfg.border; v < r.height - cfg.border; ++v)
      for (int u = cfg.border; u < r.width - cfg.border; ++u) {
        const float val = r.at(u, v);
        if (val <= 0.0f || !detail::is_local_max(r, u, v, cfg.nms_radius)) continue;
        const double ox = detail::parabolic_offset(r.clamped(u - 1, v), val, r.clamped(u + 1, v));
        const double oy = detail::parabolic_offset(r.clamped(u, v - 1), val, r.clamped(u, v + 1));
        cands.push_back({val, u + ox, v + oy, l});
        max_response = std::max(max_response, val);
      }
    levels.push_back({scale, std::move(img), {}});
  }
  const double threshold = std::max(cfg.relative_response * max_response, 1e-12);
  std::erase_if(cands, [&](const detail::Candidate& c) { return c.response < threshold; });
  std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.level != b.level) return a.level < b.level;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });

  std::vector<Feature> out;
  out.reserve(std::min<std::size_t>(cands.size(), static_cast<std::size_t>(cfg.max_keypoints)));
  for (const auto& c : cands) {
    if (static_cast<int>(out.size()) >= cfg.max_keypoints) break;
    Level& lv = levels[static_cast<std::size_t>(c.level)];
    if (lv.described.empty()) lv.described = gaussian_blur(lv.img, cfg.descriptor_blur);
    const auto angles = detail::dominant_orientations(lv.described, c.x, c.y, cfg.orientation_radius,
                                                      cfg.orientation_peak_ratio, cfg.max_orientations);
    for (const double angle : angles) {
      if (static_cast<int>(out.size()) >= cfg.max_keypoints) break;
      Feature f;
      f.scale = lv.scale;
      f.angle = angle;
      if (!detail::describe(lv.described, c.x, c.y, f.angle, cfg.patch_step, f.descriptor)) continue;
      f.kp.u = std::clamp(c.x * lv.scale, 0.0, static_cast<double>(image.width - 1));
      f.kp.v = std::clamp(c.y * lv.scale, 0.0, static_cast<double>(image.height - 1));
      f.kp.score = c.response;
      if (elevation) detail::local_elevation(*elevation, f, cfg.height_radius);
      out.push_back(f);
    }
  }
  return out;
}

namespace detail {

using Complex = std::complex<double>;

struct CandidatePair {
  std::size_t ia, ib;
  double confidence;
  double dangle;  // orientation in B minus orientation in A
  bool mutual;
  double dz;  // elevation in B minus elevation in A; NaN when unknown
};

inline double wrap_angle(double a) { return std::remainder(a, 2 * std::numbers::pi); }

/// Greedy one-to-one selection by location, in the given priority order.
inline MatchSet one_to_one(const std::vector<Match>& pairs) {
  std::set<std::pair<double, double>> used_a, used_b;
  MatchSet out;
  for (const auto& m : pairs) {
    if (used_a.count({m.source.u, m.source.v}) || used_b.count({m.target.u, m.target.v})) continue;
    used_a.insert({m.source.u, m.source.v});
    used_b.insert({m.target.u, m.target.v});
    out.pairs.push_back(m);
  }
  return out;
}

/// Similarity b = z·a + t in complex form.
struct Similarity2 {
  Complex z{1.0, 0.0};
  Complex t{0.0, 0.0};
  Complex operator()(Complex a) const { return z * a + t; }
};

/// Least-squares similarity over index pairs.
inline std::optional<Similarity2> fit_similarity(const std::vector<Complex>& a, const std::vector<Complex>& b) {
  if (a.size() < 2) return std::nullopt;
  Complex ma{0, 0}, mb{0, 0};
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  Complex num{0, 0};
  double den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    num += std::conj(a[k] - ma) * (b[k] - mb);
    den += std::norm(a[k] - ma);
  }
  if (den <= 0.0) return std::nullopt;
  Similarity2 s;
  s.z = num / den;
  s.t = mb - s.z * ma;
  return s;
}

/// Keeps the candidates consistent with the best-supported 2D similarity.
/// Hypotheses come from pairs of candidates on nearby keypoints whose
/// orientations agree with the implied rotation; they are voted into coarse
/// bins and the best-voted bins are scored against every candidate.
inline MatchSet geometric_filter(const std::vector<Feature>& fa, const std::vector<Feature>& fb,
                                 const std::vector<CandidatePair>& cands, const MatcherConfig& cfg) {
  const std::size_t n = cands.size();
  if (n < 2) return {};
  std::vector<Complex> pa(n), pb(n);
  for (std::size_t k = 0; k < n; ++k) {
    pa[k] = {fa[cands[k].ia].kp.u, fa[cands[k].ia].kp.v};
    pb[k] = {fb[cands[k].ib].kp.u, fb[cands[k].ib].kp.v};
  }
  const double otol = cfg.orientation_tolerance_deg * std::numbers::pi / 180.0;
  auto scale_ok = [&](double scale) {
    if (cfg.expected_scale > 0.0) return std::abs(std::log(scale / cfg.expected_scale)) <= std::log1p(cfg.scale_tolerance);
    return scale <= cfg.max_scale_ratio && scale >= 1.0 / cfg.max_scale_ratio;
  };
  const double min_sep2 = cfg.hypothesis_min_separation * cfg.hypothesis_min_separation;
  const double max_sep2 = cfg.hypothesis_max_separation * cfg.hypothesis_max_separation;

  // Candidates grouped by source keypoint location, ordered by u for a sweep.
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (pa[x].real() != pa[y].real()) return pa[x].real() < pa[y].real();
    if (pa[x].imag() != pa[y].imag()) return pa[x].imag() < pa[y].imag();
    return x < y;
  });

  const double htol = cfg.height_tolerance;
  const bool use_dz = htol > 0.0;
  constexpr long kNoOffset = std::numeric_limits<long>::min();

  struct Hypothesis {
    Similarity2 sim;
    double dz;
  };
  std::vector<Hypothesis> hyps;
  std::map<std::array<long, 5>, std::vector<std::size_t>> bins;
  Complex ref{0.0, 0.0};
  for (const auto& p : pa) ref += p;
  ref /= static_cast<double>(n);
  for (std::size_t x = 0; x < n; ++x) {
    const std::size_t i = order[x];
    for (std::size_t y = x + 1; y < n; ++y) {
      const std::size_t j = order[y];
      const double du = pa[j].real() - pa[i].real();
      if (du * du > max_sep2) break;
      const Complex da = pa[j] - pa[i], db = pb[j] - pb[i];
      const double sa = std::norm(da), sb = std::norm(db);
      if (sa < min_sep2 || sa > max_sep2 || sb < min_sep2 || sb > max_sep2) continue;
      if (cands[i].ib == cands[j].ib) continue;
      const Complex z = db / da;
      const double scale = std::abs(z);
      if (!scale_ok(scale)) continue;
      const double phi = std::arg(z);
      if (std::abs(wrap_angle(cands[i].dangle - phi)) > otol || std::abs(wrap_angle(cands[j].dangle - phi)) > otol)
        continue;
      double dz = std::numeric_limits<double>::quiet_NaN();
      if (use_dz) {
        const double di = cands[i].dz, dj = cands[j].dz;
        if (!std::isnan(di) && !std::isnan(dj) && std::abs(di - dj) > htol) continue;
        dz = std::isnan(di) ? dj : std::isnan(dj) ? di : 0.5 * (di + dj);
      }
      const Similarity2 sim{z, pb[i] - z * pa[i]};
      const Complex at_ref = sim(ref);
      const std::array<long, 5> key{std::lround(phi / (std::numbers::pi / 18.0)), std::lround(std::log2(scale) / 0.25),
                                    std::lround(at_ref.real() / 16.0), std::lround(at_ref.imag() / 16.0),
                                    std::isnan(dz) ? kNoOffset : std::lround(dz / (2.0 * htol))};
      bins[key].push_back(hyps.size());
      hyps.push_back({sim, dz});
    }
  }
  if (hyps.empty()) return {};

  std::vector<std::pair<std::size_t, std::array<long, 5>>> ranked;
  ranked.reserve(bins.size());
  for (const auto& [key, members] : bins) ranked.push_back({members.size(), key});
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  if (ranked.size() > static_cast<std::size_t>(cfg.hypothesis_bins_evaluated))
    ranked.resize(static_cast<std::size_t>(cfg.hypothesis_bins_evaluated));

  auto inliers_of = [&](const Similarity2& sim, double dz, std::vector<std::size_t>& idx) {
    idx.clear();
    const double scale = std::abs(sim.z);
    if (!(scale > 0.0)) return 0.0;
    const double norm = 1.0 / std::sqrt(scale), phi = std::arg(sim.z);
    double err_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::isnan(dz) && !std::isnan(cands[k].dz) && std::abs(cands[k].dz - dz) > htol) continue;
      const double err = std::abs(sim(pa[k]) - pb[k]) * norm;
      if (err <= cfg.geometric_tolerance && std::abs(wrap_angle(cands[k].dangle - phi)) <= otol) {
        idx.push_back(k);
        err_sum += err;
      }
    }
    return err_sum;
  };
  // Support counts occupied cells, so a cluster of keypoints on one structure counts once per cell.
  const double cell = std::max(cfg.support_cell, 1e-9);
  auto distinct = [&](const std::vector<std::size_t>& idx) {
    std::set<std::pair<long, long>> sa, sb;
    for (std::size_t k : idx) {
      sa.insert({std::lround(std::floor(pa[k].real() / cell)), std::lround(std::floor(pa[k].imag() / cell))});
      sb.insert({std::lround(std::floor(pb[k].real() / cell)), std::lround(std::floor(pb[k].imag() / cell))});
    }
    return std::min(sa.size(), sb.size());
  };

  std::size_t best_count = 0;
  double best_err = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> best_idx, idx;
  for (const auto& [votes, key] : ranked) {
    const auto& members = bins[key];
    // A bin's hypotheses are near-identical; a few representatives suffice.
    const std::size_t reps = std::min<std::size_t>(members.size(), 3);
    for (std::size_t r = 0; r < reps; ++r) {
      Similarity2 sim = hyps[members[r * members.size() / reps]].sim;
      double dz = hyps[members[r * members.size() / reps]].dz;
      for (int refine = 0; refine < 3; ++refine) {
        inliers_of(sim, dz, idx);
        std::vector<Complex> a, b;
        std::vector<double> offsets;
        for (std::size_t k : idx) {
          a.push_back(pa[k]);
          b.push_back(pb[k]);
          if (!std::isnan(cands[k].dz)) offsets.push_back(cands[k].dz);
        }
        const auto fit = fit_similarity(a, b);
        if (!fit) break;
        if (!scale_ok(std::abs(fit->z))) break;
        sim = *fit;
        if (use_dz && !offsets.empty()) {
          std::nth_element(offsets.begin(), offsets.begin() + offsets.size() / 2, offsets.end());
          dz = offsets[offsets.size() / 2];
        }
      }
      const double err = inliers_of(sim, dz, idx);
      const std::size_t count = distinct(idx);
      if (count > best_count || (count == best_count && err < best_err)) {
        best_count = count;
        best_err = err;
        best_idx = idx;
      }
    }
  }
  if (best_count < static_cast<std::size_t>(cfg.min_geometric_inliers)) return {};
  // Mutual matches take precedence over top-k candidates, then confidence.
  std::stable_sort(best_idx.begin(), best_idx.end(), [&](std::size_t x, std::size_t y) {
    if (cands[x].mutual != cands[y].mutual) return cands[x].mutual;
    return cands[x].confidence > cands[y].confidence;
  });
  std::vector<Match> pairs;
  for (std::size_t k : best_idx) pairs.push_back({fa[cands[k].ia].kp, fb[cands[k].ib].kp, cands[k].confidence});
  return one_to_one(pairs);
}

/// Lexicographic order on feature lists, used to make matching independent of argument order.
inline bool features_less(const std::vector<Feature>& a, const std::vector<Feature>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto ka = std::tie(a[k].kp.u, a[k].kp.v, a[k].angle, a[k].scale);
    const auto kb = std::tie(b[k].kp.u, b[k].kp.v, b[k].angle, b[k].scale);
    if (ka != kb) return ka < kb;
  }
  return false;
}

inline MatchSet swap_roles(MatchSet ms) {
  for (auto& m : ms.pairs) std::swap(m.source, m.target);
  return ms;
}

inline MatchSet match_features_ordered(const std::vector<Feature>& fa, const std::vector<Feature>& fb,
                                       const MatcherConfig& cfg) {
  if (fa.empty() || fb.empty()) return {};
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat A(static_cast<Eigen::Index>(fa.size()), kDescriptorSize), B(static_cast<Eigen::Index>(fb.size()), kDescriptorSize);
  for (std::size_t i = 0; i < fa.size(); ++i)
    A.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(fa[i].descriptor.data(), kDescriptorSize);
  for (std::size_t j = 0; j < fb.size(); ++j)
    B.row(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::RowVectorXf>(fb[j].descriptor.data(), kDescriptorSize);
  const RowMat raw = A * B.transpose();
  const auto na = raw.rows(), nb = raw.cols();
  // Ranking similarity: descriptor correlation less a penalty for differing relief.
  RowMat S = raw;
  if (cfg.relief_weight > 0.0) {
    for (Eigen::Index i = 0; i < na; ++i) {
      const double ra = fa[static_cast<std::size_t>(i)].relief;
      if (std::isnan(ra)) continue;
      for (Eigen::Index j = 0; j < nb; ++j) {
        const double rb = fb[static_cast<std::size_t>(j)].relief;
        if (std::isnan(rb)) continue;
        S(i, j) -= static_cast<float>(cfg.relief_weight * std::min(std::abs(ra - rb), cfg.relief_cap));
      }
    }
  }
  // Pairs at incompatible heights drop below every real similarity.
  constexpr float kExcluded = -4.0f;
  if (cfg.max_height_offset > 0.0) {
    for (Eigen::Index i = 0; i < na; ++i)
      for (Eigen::Index j = 0; j < nb; ++j)
        if (std::abs(fb[static_cast<std::size_t>(j)].height - fa[static_cast<std::size_t>(i)].height) > cfg.max_height_offset)
          S(i, j) = kExcluded;
  }

  std::vector<Eigen::Index> best_in_b(static_cast<std::size_t>(na)), best_in_a(static_cast<std::size_t>(nb));
  for (Eigen::Index i = 0; i < na; ++i) S.row(i).maxCoeff(&best_in_b[static_cast<std::size_t>(i)]);
  for (Eigen::Index j = 0; j < nb; ++j) S.col(j).maxCoeff(&best_in_a[static_cast<std::size_t>(j)]);

  auto dist = [](float s) { return std::sqrt(std::max(0.0, 2.0 - 2.0 * static_cast<double>(s))); };
  const double excl2 = cfg.ratio_exclusion_px * cfg.ratio_exclusion_px;
  auto near = [&](const Keypoint2& p, const Keypoint2& q) {
    return (p.u - q.u) * (p.u - q.u) + (p.v - q.v) * (p.v - q.v) <= excl2;
  };
  auto confidence = [](float s) { return std::clamp(0.5 * (1.0 + static_cast<double>(s)), 0.0, 1.0); };

  std::vector<Match> mutual;
  std::set<std::pair<std::size_t, std::size_t>> mutual_idx;
  for (Eigen::Index i = 0; i < na; ++i) {
    const Eigen::Index j = best_in_b[static_cast<std::size_t>(i)];
    if (best_in_a[static_cast<std::size_t>(j)] != i) continue;
    const float s = S(i, j);
    if (s <= kExcluded) continue;
    float second_b = -2.0f, second_a = -2.0f;
    for (Eigen::Index k = 0; k < nb; ++k)
      if (k != j && !near(fb[static_cast<std::size_t>(k)].kp, fb[static_cast<std::size_t>(j)].kp))
        second_b = std::max(second_b, S(i, k));
    for (Eigen::Index k = 0; k < na; ++k)
      if (k != i && !near(fa[static_cast<std::size_t>(k)].kp, fa[static_cast<std::size_t>(i)].kp))
        second_a = std::max(second_a, S(k, j));
    const double d1 = dist(s);
    if (second_b > -2.0f && !(d1 < cfg.ratio_threshold * dist(second_b))) continue;
    if (second_a > -2.0f && !(d1 < cfg.ratio_threshold * dist(second_a))) continue;
    mutual.push_back({fa[static_cast<std::size_t>(i)].kp, fb[static_cast<std::size_t>(j)].kp, confidence(raw(i, j))});
    mutual_idx.insert({static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
  }
  if (!cfg.geometric_check) {
    std::stable_sort(mutual.begin(), mutual.end(), [](const Match& a, const Match& b) { return a.confidence > b.confidence; });
    return one_to_one(mutual);
  }

  std::set<std::pair<std::size_t, std::size_t>> chosen(mutual_idx);
  const Eigen::Index k = std::min<Eigen::Index>(cfg.candidate_k, std::min(na, nb));
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < na; ++i) {
    idx.resize(static_cast<std::size_t>(nb));
    for (Eigen::Index j = 0; j < nb; ++j) idx[static_cast<std::size_t>(j)] = j;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index x, Eigen::Index y) {
      return S(i, x) != S(i, y) ? S(i, x) > S(i, y) : x < y;
    });
    for (Eigen::Index r = 0; r < k; ++r) chosen.insert({static_cast<std::size_t>(i), static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])});
  }
  for (Eigen::Index j = 0; j < nb; ++j) {
    idx.resize(static_cast<std::size_t>(na));
    for (Eigen::Index i = 0; i < na; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index x, Eigen::Index y) {
      return S(x, j) != S(y, j) ? S(x, j) > S(y, j) : x < y;
    });
    for (Eigen::Index r = 0; r < k; ++r) chosen.insert({static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]), static_cast<std::size_t>(j)});
  }
  std::vector<CandidatePair> cands;
  cands.reserve(chosen.size());
  for (const auto& [i, j] : chosen)
    if (S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) > kExcluded)
      cands.push_back({i, j, confidence(raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))),
                     wrap_angle(fb[j].angle - fa[i].angle), mutual_idx.count({i, j}) > 0, fb[j].height - fa[i].height});
  return geometric_filter(fa, fb, cands, cfg);
}

}  // namespace detail

/// Mutual nearest neighbours under descriptor correlation with the ratio test
/// applied in both directions. With the geometric check on, the mutual
/// matches and each keypoint's top candidates are verified against one 2D
/// similarity. The result does not depend on the argument order.
inline MatchSet match_features(const std::vector<Feature>& fa, const std::vector<Feature>& fb,
                               const MatcherConfig& cfg = {}) {
  if (detail::features_less(fb, fa)) {
    MatcherConfig swapped = cfg;
    if (cfg.expected_scale > 0.0) swapped.expected_scale = 1.0 / cfg.expected_scale;
    return detail::swap_roles(detail::match_features_ordered(fb, fa, swapped));
  }
  return detail::match_features_ordered(fa, fb, cfg);
}

// ---------------------------------------------------------------------------
// Match JSON ("mtpcr-match/1") and the external matcher process protocol.

inline constexpr const char* kMatchSchema = "mtpcr-match/1";

inline nlohmann::ordered_json match_set_to_json(const MatchSet& ms) {
  nlohmann::ordered_json j;
  j["schema"] = kMatchSchema;
  auto& arr = j["matches"] = nlohmann::ordered_json::array();
  for (const auto& m : ms.pairs)
    arr.push_back({{"u0", m.source.u}, {"v0", m.source.v}, {"u1", m.target.u}, {"v1", m.target.v}, {"score", m.confidence}});
  return j;
}

/// Parses match JSON, checking bounds against the two image sizes. Duplicate
/// source keypoints keep their highest-scoring pair.
inline MatchSet match_set_from_json(const nlohmann::json& j, int wa, int ha, int wb, int hb) {
  auto fail = [](const std::string& m) { return Error(ErrorCode::kExternalMatcherFailure, m); };
  if (!j.is_object() || !j.contains("matches") || !j["matches"].is_array()) throw fail("match JSON lacks a 'matches' array");
  if (j.contains("schema") && j["schema"] != kMatchSchema) throw fail("unsupported match schema");
  std::map<std::pair<double, double>, Match> by_source;
  for (const auto& m : j["matches"]) {
    for (const char* key : {"u0", "v0", "u1", "v1", "score"})
      if (!m.contains(key) || !m[key].is_number()) throw fail(std::string("match entry lacks numeric '") + key + "'");
    Match mt{{m["u0"].get<double>(), m["v0"].get<double>(), 0.0},
             {m["u1"].get<double>(), m["v1"].get<double>(), 0.0},
             m["score"].get<double>()};
    if (!std::isfinite(mt.source.u) || !std::isfinite(mt.source.v) || !std::isfinite(mt.target.u) ||
        !std::isfinite(mt.target.v) || !std::isfinite(mt.confidence))
      throw fail("non-finite value in match entry");
    if (mt.source.u < 0 || mt.source.v < 0 || mt.source.u >= wa || mt.source.v >= ha || mt.target.u < 0 ||
        mt.target.v < 0 || mt.target.u >= wb || mt.target.v >= hb)
      throw fail("match keypoint outside image bounds");
    mt.confidence = std::clamp(mt.confidence, 0.0, 1.0);
    mt.source.score = mt.target.score = mt.confidence;
    auto [it, inserted] = by_source.try_emplace({mt.source.u, mt.source.v}, mt);
    if (!inserted && mt.confidence > it->second.confidence) it->second = mt;
  }
  MatchSet out;
  for (auto& [key, m] : by_source) out.pairs.push_back(m);
  return out;
}

namespace detail {

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

inline std::string substitute(std::string tmpl, const std::string& key, const std::string& value) {
  for (std::size_t pos = tmpl.find(key); pos != std::string::npos; pos = tmpl.find(key, pos + value.size()))
    tmpl.replace(pos, key.size(), value);
  return tmpl;
}

/// Fresh directory unique to this process and call.
inline std::filesystem::path unique_work_dir(const std::filesystem::path& root) {
  static std::atomic<std::uint64_t> counter{0};
  const auto base = root.empty() ? std::filesystem::temp_directory_path() : root;
  for (;;) {
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    auto dir = base / ("mtpcr-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
                       std::to_string(stamp));
    if (std::filesystem::create_directories(dir)) return dir;
  }
}

}  // namespace detail

/// Runs the configured external matcher on two images and reads its JSON.
inline MatchSet match_external(const ImageU8& a, const ImageU8& b, const MatcherConfig& cfg) {
  const auto dir = detail::unique_work_dir(cfg.work_dir);
  struct Cleanup {
    std::filesystem::path p;
    ~Cleanup() {
      std::error_code ec;
      std::filesystem::remove_all(p, ec);
    }
  } cleanup{dir};
  const auto pa = dir / "imgA.pgm", pb = dir / "imgB.pgm", po = dir / "matches.json";
  encode_image(a, pa);
  encode_image(b, pb);
  std::string cmd = detail::substitute(cfg.external_command, "{imgA}", detail::shell_quote(pa.string()));
  cmd = detail::substitute(cmd, "{imgB}", detail::shell_quote(pb.string()));
  cmd = detail::substitute(cmd, "{out}", detail::shell_quote(po.string()));
  const int status = std::system(cmd.c_str());
  if (status != 0) {
    throw Error(ErrorCode::kExternalMatcherFailure, "external matcher exited with status " + std::to_string(status));
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(po));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kExternalMatcherFailure, std::string("malformed matcher output: ") + e.what());
  } catch (const Error&) {
    throw Error(ErrorCode::kExternalMatcherFailure, "external matcher wrote no output file");
  }
  return match_set_from_json(j, a.width, a.height, b.width, b.height);
}

/// Elevation grids are optional and only used by the builtin matcher.
inline MatchSet match(const ImageU8& a, const ImageU8& b, const MatcherConfig& cfg = {},
                      const Elevation* ea = nullptr, const Elevation* eb = nullptr) {
  cfg.validate();
  if (a.empty() || b.empty()) throw Error(ErrorCode::kInvalidParameter, "match: empty image");
  if (cfg.backend == MatcherBackend::kExternal) return match_external(a, b, cfg);
  return match_features(detect_keypoints(a, cfg, ea), detect_keypoints(b, cfg, eb), cfg);
}

struct OverlapFractions {
  double source = 0.0;
  double target = 0.0;
};

/// Bounding-box area of the matched keypoints over image area, per image.
inline OverlapFractions estimate_overlap_fraction(const MatchSet& ms, int wa, int ha, int wb, int hb) {
  if (ms.empty()) return {};
  auto frac = [&](auto get, int w, int h) {
    double u0 = std::numeric_limits<double>::infinity(), v0 = u0, u1 = -u0, v1 = -u0;
    for (const auto& m : ms.pairs) {
      const Keypoint2& k = get(m);
      u0 = std::min(u0, k.u);
      v0 = std::min(v0, k.v);
      u1 = std::max(u1, k.u);
      v1 = std::max(v1, k.v);
    }
    const double area = (u1 - u0 + 1.0) * (v1 - v0 + 1.0);
    return std::clamp(area / (static_cast<double>(w) * h), 0.0, 1.0);
  };
  return {frac([](const Match& m) -> const Keypoint2& { return m.source; }, wa, ha),
          frac([](const Match& m) -> const Keypoint2& { return m.target; }, wb, hb)};
}

namespace detail {

struct PixelBox {
  int u0, v0, w, h;
};

inline PixelBox focus_box(const MatchSet& ms, bool source, int width, int height, int margin) {
  double u0 = std::numeric_limits<double>::infinity(), v0 = u0, u1 = -u0, v1 = -u0;
  for (const auto& m : ms.pairs) {
    const Keypoint2& k = source ? m.source : m.target;
    u0 = std::min(u0, k.u);
    v0 = std::min(v0, k.v);
    u1 = std::max(u1, k.u);
    v1 = std::max(v1, k.v);
  }
  const int a = std::max(0, static_cast<int>(std::floor(u0)) - margin);
  const int b = std::max(0, static_cast<int>(std::floor(v0)) - margin);
  const int c = std::min(width - 1, static_cast<int>(std::ceil(u1)) + margin);
  const int d = std::min(height - 1, static_cast<int>(std::ceil(v1)) + margin);
  return {a, b, c - a + 1, d - b + 1};
}

inline std::pair<long long, long long> half_pixel_key(const Keypoint2& k) {
  return {std::llround(2.0 * k.u), std::llround(2.0 * k.v)};
}

}  // namespace detail

/// Union of `base` and `extra`, deduplicated on 0.5-px keypoint keys. A pair
/// duplicating an existing one replaces it only with higher confidence; pairs
/// that would reuse an already-matched keypoint are skipped.
inline MatchSet merge_matches(const MatchSet& base, const MatchSet& extra) {
  MatchSet out = base;
  std::map<std::pair<long long, long long>, std::size_t> by_src, by_tgt;
  for (std::size_t i = 0; i < out.pairs.size(); ++i) {
    by_src.emplace(detail::half_pixel_key(out.pairs[i].source), i);
    by_tgt.emplace(detail::half_pixel_key(out.pairs[i].target), i);
  }
  for (const auto& m : extra.pairs) {
    const auto ks = detail::half_pixel_key(m.source), kt = detail::half_pixel_key(m.target);
    const auto is = by_src.find(ks), it = by_tgt.find(kt);
    if (is != by_src.end() && it != by_tgt.end() && is->second == it->second) {
      if (m.confidence > out.pairs[is->second].confidence) out.pairs[is->second] = m;
      continue;
    }
    if (is != by_src.end() || it != by_tgt.end()) continue;
    by_src.emplace(ks, out.pairs.size());
    by_tgt.emplace(kt, out.pairs.size());
    out.pairs.push_back(m);
  }
  return out;
}

/// Re-runs detection and matching inside the margin-expanded bounding boxes
/// of the current matches and merges the result into `ms`.
inline MatchSet focus_rematch(const ImageU8& a, const ImageU8& b, const MatchSet& ms, const MatcherConfig& cfg = {},
                              const Elevation* ea = nullptr, const Elevation* eb = nullptr) {
  if (ms.empty()) return ms;
  const auto ba = detail::focus_box(ms, true, a.width, a.height, cfg.focus_margin);
  const auto bb = detail::focus_box(ms, false, b.width, b.height, cfg.focus_margin);
  constexpr int kMinCrop = 16;
  if (ba.w < kMinCrop || ba.h < kMinCrop || bb.w < kMinCrop || bb.h < kMinCrop) return ms;
  if (ba.w == a.width && ba.h == a.height && bb.w == b.width && bb.h == b.height) return ms;
  std::optional<Elevation> ca, cb;
  if (ea) ca = crop(*ea, ba.u0, ba.v0, ba.w, ba.h);
  if (eb) cb = crop(*eb, bb.u0, bb.v0, bb.w, bb.h);
  MatchSet local = match(crop(a, ba.u0, ba.v0, ba.w, ba.h), crop(b, bb.u0, bb.v0, bb.w, bb.h), cfg,
                         ca ? &*ca : nullptr, cb ? &*cb : nullptr);
  for (auto& m : local.pairs) {
    m.source.u += ba.u0;
    m.source.v += ba.v0;
    m.target.u += bb.u0;
    m.target.v += bb.v0;
  }
  return merge_matches(ms, local);
}

struct MatchReport {
  MatchSet matches;
  std::size_t initial_count = 0;
  OverlapFractions overlap;
  bool focus_triggered = false;
};

inline MatchReport match_pipeline_detailed(const ImageU8& a, const ImageU8& b, const MatcherConfig& cfg = {},
                                           const Elevation* ea = nullptr, const Elevation* eb = nullptr) {
  MatchReport rep;
  rep.matches = match(a, b, cfg, ea, eb);
  rep.initial_count = rep.matches.size();
  rep.overlap = estimate_overlap_fraction(rep.matches, a.width, a.height, b.width, b.height);
  if (cfg.focus_enabled && !rep.matches.empty() &&
      std::min(rep.overlap.source, rep.overlap.target) < cfg.focus_threshold) {
    rep.focus_triggered = true;
    rep.matches = focus_rematch(a, b, rep.matches, cfg, ea, eb);
  }
  return rep;
}

/// Matching gated by the estimated overlap: below θ the FOCUS pass runs.
inline MatchSet match_pipeline(const ImageU8& a, const ImageU8& b, const MatcherConfig& cfg = {},
                               const Elevation* ea = nullptr, const Elevation* eb = nullptr) {
  return match_pipeline_detailed(a, b, cfg, ea, eb).matches;
}

}  // namespace mtpcr
