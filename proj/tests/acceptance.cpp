// Acceptance checks: one PASS/FAIL line per criterion. Tolerances are fixed here.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>

#include "test_util.hpp"

using namespace mtpcr;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Larger of the rotation Frobenius gap and the translation distance.
double transform_gap(const RigidTransform& a, const RigidTransform& b) {
  return std::max((a.R - b.R).norm(), (a.t - b.t).norm());
}

CorrespondenceSet exact_pairs(const PointCloud& c, const RigidTransform& T) {
  CorrespondenceSet cs;
  for (const auto& p : c.points) cs.push_back({p, T(p), 1.0});
  return cs;
}

// Closed-form rigid fit on exact data.
Outcome kabsch_oracle() {
  constexpr int kInstances = 1000;
  constexpr double kTol = 1e-9, kBudget = 5.0;
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<int> n_dist(3, 500);
  double worst = 0.0;
  const auto t0 = Clock::now();
  for (int i = 0; i < kInstances; ++i) {
    const auto cloud = testutil::random_cloud(rng, static_cast<std::size_t>(n_dist(rng)));
    const auto T = testutil::random_transform(rng);
    worst = std::max(worst, transform_gap(kabsch(exact_pairs(cloud, T)), T));
  }
  const double secs = seconds_since(t0);
  return {worst < kTol && secs < kBudget, fmt("worst error %.3g (< %.0e), %.2f s (< %.0f s)", worst, kTol, secs, kBudget)};
}

// Iterative rejection with 30% gross outliers.
Outcome outlier_rejection() {
  constexpr int kInstances = 200;
  constexpr double kTol = 1e-6, kRate = 0.99;
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<int> n_dist(20, 300);
  int ok = 0;
  for (int i = 0; i < kInstances; ++i) {
    const int n = n_dist(rng);
    const int outliers = static_cast<int>(std::lround(0.3 * n));
    const auto T = testutil::random_transform(rng);
    auto cs = exact_pairs(testutil::random_cloud(rng, static_cast<std::size_t>(n - outliers)), T);
    const auto junk = testutil::random_cloud(rng, static_cast<std::size_t>(2 * outliers));
    for (int k = 0; k < outliers; ++k) cs.push_back({junk[2 * k], T(junk[2 * k + 1]), 1.0});
    std::shuffle(cs.begin(), cs.end(), rng);
    try {
      ok += transform_gap(robust_estimate(cs).transform, T) < kTol;
    } catch (const Error&) {
    }
  }
  const double rate = static_cast<double>(ok) / kInstances;
  return {rate >= kRate, fmt("%d/%d recovered within %.0e (rate %.3f, need >= %.2f)", ok, kInstances, kTol, rate, kRate)};
}

// Rasterize, then lift every occupied pixel back to 3D.
Outcome raster_round_trip() {
  constexpr int kClouds = 100;
  std::mt19937_64 rng(1003);
  std::uniform_real_distribution<double> log_n(3.0, 5.0), ures(0.2, 5.0), uext(10.0, 300.0);
  std::size_t pixels = 0, bad_bucket = 0, bad_height = 0, bad_dequant = 0, bad_member = 0;
  for (int k = 0; k < kClouds; ++k) {
    const auto n = static_cast<std::size_t>(std::lround(std::pow(10.0, log_n(rng))));
    const double ext = uext(rng), res = ures(rng);
    auto cloud = testutil::random_cloud(rng, n, -ext / 2, ext / 2);
    for (auto& p : cloud.points) p.z() *= 0.1;
    const auto scaled = scale_cloud(cloud, res);
    const auto r = rasterize(scaled, res);
    // Every input point falls in an occupied bucket no higher than its max.
    for (const auto& p : scaled.points) {
      const int u = bucket_index(p.x() - r.x_min), v = bucket_index(p.y() - r.y_min);
      bad_member += !r.occupied(u, v) || p.z() > r.H.at(u, v);
    }
    const double tol = (r.z_max - r.z_min) / 510.0 + 1e-12;
    for (int v = 0; v < r.height; ++v)
      for (int u = 0; u < r.width; ++u) {
        if (!r.occupied(u, v)) continue;
        ++pixels;
        const Keypoint2 kp{static_cast<double>(u), static_cast<double>(v), 1.0};
        const Point3 p = lift_point(kp, r, HeightRecovery::kExact);
        const Point3 s = p * res;
        bad_bucket += bucket_index(s.x() - r.x_min) != u || bucket_index(s.y() - r.y_min) != v;
        bad_height += p.z() * res != r.H.at(u, v);
        const Point3 d = lift_point(kp, r, HeightRecovery::kDequantized);
        bad_dequant += std::abs(d.z() * res - r.H.at(u, v)) > tol;
      }
  }
  const bool pass = !bad_bucket && !bad_height && !bad_dequant && !bad_member;
  return {pass, fmt("%zu pixels: %zu bucket mismatches, %zu inexact heights, %zu dequantized over bound, "
                    "%zu points outside their bucket",
                    pixels, bad_bucket, bad_height, bad_dequant, bad_member)};
}

// Rotation and translation error identities, rmsd against a brute-force sum.
Outcome metric_identities() {
  std::vector<std::string> fails;
  if (rotation_translation_error(residual_transform(RigidTransform::identity(), RigidTransform::identity()))
          .rotation_deg != 0.0)
    fails.push_back("e_r(I) != 0");
  std::mt19937_64 rng(1004);
  double worst_angle = 0.0;
  for (double theta : {1.0, 5.0, 30.0, 90.0, 179.0}) {
    const Eigen::Vector3d axis = random_unit_vector(rng);
    const RigidTransform gt = testutil::random_transform(rng);
    const RigidTransform est =
        RigidTransform::from(Eigen::AngleAxisd(theta * M_PI / 180.0, axis).toRotationMatrix(), Eigen::Vector3d::Zero()) * gt;
    worst_angle = std::max(worst_angle, std::abs(rotation_translation_error(residual_transform(est, gt)).rotation_deg - theta));
  }
  if (!(worst_angle <= 1e-9)) fails.push_back(fmt("angle error %.3g", worst_angle));
  const double et = rotation_translation_error(RigidTransform::from(Eigen::Matrix3d::Identity(), {3, 4, 0})).translation_m;
  if (et != 5.0) fails.push_back(fmt("e_t(3,4,0) = %.17g", et));
  double worst_rmsd = 0.0;
  for (int k = 0; k < 20; ++k) {
    const auto c = testutil::random_cloud(rng, 1000);
    const auto a = testutil::random_transform(rng), b = testutil::random_transform(rng);
    long double sum = 0;
    for (const auto& p : c.points)
      for (int i = 0; i < 3; ++i) {
        long double ai = a.t(i), bi = b.t(i);
        for (int j = 0; j < 3; ++j) {
          ai += static_cast<long double>(a.R(i, j)) * p(j);
          bi += static_cast<long double>(b.R(i, j)) * p(j);
        }
        sum += (ai - bi) * (ai - bi);
      }
    const double brute = static_cast<double>(std::sqrt(sum / c.size()));
    worst_rmsd = std::max(worst_rmsd, std::abs(rmsd(c, a, b) - brute));
  }
  if (!(worst_rmsd <= 1e-12)) fails.push_back(fmt("rmsd gap %.3g", worst_rmsd));
  std::string detail = fmt("max angle error %.3g deg, e_t(3,4,0) = %g, max rmsd gap %.3g m", worst_angle, et, worst_rmsd);
  for (const auto& f : fails) detail += "; " + f;
  return {fails.empty(), detail};
}

// Edge-then-sharpen enhancement.
Outcome enhancement() {
  const Kernel3 w1{{{-2, -2, -2}, {-2, 32, -2}, {-2, -2, -2}}};
  const Kernel3 w2{{{-1, -1, -1}, {-1, 10, -1}, {-1, -1, -1}}};
  const bool kernels = EnhanceKernels::w1 == w1 && EnhanceKernels::w2 == w2;
  const ImageU8 flat(9, 7, 5);
  const ImageU8 once = convolve_clamped(flat, EnhanceKernels::w1);
  const ImageU8 out = enhance(flat);
  bool constant = true;
  for (std::size_t i = 0; i < out.data.size(); ++i) constant &= once.data[i] == 80 && out.data[i] == 160;
  return {kernels && constant, fmt("kernels %s, constant 5 -> %d -> %d", kernels ? "match" : "differ",
                                   static_cast<int>(once.data[0]), static_cast<int>(out.data[0]))};
}

// Full pipeline on synthetic city scenes under random perturbations.
Outcome synthetic_end_to_end() {
  constexpr int kSeeds = 4, kTrialsPerSeed = 5;
  constexpr double kSrr = 0.9, kEr = 1.0, kEt = 2.0, kBudget = 60.0;
  int trials = 0, ok = 0;
  double er = 0, et = 0, slowest = 0, min_ov = 1, max_ov = 0;
  std::size_t min_pts = SIZE_MAX, max_pts = 0;
  for (int s = 1; s <= kSeeds; ++s) {
    RunConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(s);
    cfg.apply_seed();
    const Scene scene = generate_scene(cfg.scene);
    min_ov = std::min(min_ov, scene.realized_overlap);
    max_ov = std::max(max_ov, scene.realized_overlap);
    const std::size_t pts = scene.aerial.size() + scene.terrestrial.size();
    min_pts = std::min(min_pts, pts);
    max_pts = std::max(max_pts, pts);
    for (int i = 0; i < kTrialsPerSeed; ++i) {
      auto rng = substream(cfg.benchmark.rng_seed, static_cast<std::uint64_t>(i));
      const auto P = sample_random_transform(cfg.benchmark, rng);
      const auto gt = scene.ground_truth * P.inverse();
      const PointCloud moved = apply_transform(scene.aerial, P);
      const auto t0 = Clock::now();
      MetricReport m;
      try {
        const auto rep = register_clouds(moved, scene.terrestrial, cfg.pipeline);
        m = score_registration(moved, rep.transform, gt, cfg.benchmark.sigma_r, cfg.benchmark.sigma_t);
      } catch (const Error& e) {
        m = failure_report(e.what());
      }
      slowest = std::max(slowest, seconds_since(t0));
      ++trials;
      if (m.success) {
        ++ok;
        er += m.e_r;
        et += m.e_t;
      }
    }
  }
  const double rate = static_cast<double>(ok) / trials;
  er = ok ? er / ok : 180.0;
  et = ok ? et / ok : INFINITY;
  const bool in_band = min_ov >= 0.15 && max_ov <= 0.25;
  const bool pass = rate >= kSrr && er < kEr && et < kEt && slowest < kBudget && in_band;
  return {pass, fmt("%d trials, %zu-%zu points, overlap %.3f-%.3f: SRR %.3f (>= %.1f), mean e_r %.3f deg (< %.0f), "
                    "mean e_t %.3f m (< %.0f), slowest %.1f s (< %.0f)",
                    trials, min_pts, max_pts, min_ov, max_ov, rate, kSrr, er, kEr, et, kEt, slowest, kBudget)};
}

Outcome focus_gain() {
  constexpr int kPairs = 10, kStrict = 8;
  int pairs = 0, strict = 0, worse = 0;
  std::string counts;
  for (int s = 1; pairs < kPairs && s <= 40; ++s) {
    RunConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(100 + s);
    cfg.scene.target_overlap = 0.15;
    cfg.apply_seed();
    Scene scene;
    try {
      scene = generate_scene(cfg.scene);
    } catch (const Error&) {
      continue;
    }
    const auto ps = prepare_cloud(scene.aerial, cfg.pipeline), pt = prepare_cloud(scene.terrestrial, cfg.pipeline);
    const auto rep = match_prepared(ps, pt, cfg.pipeline);
    if (!rep.focus_triggered) continue;  // estimated overlap not below the threshold
    ++pairs;
    const std::size_t pre = rep.initial_count, post = rep.matches.size();
    strict += post > pre;
    worse += post < pre;
    counts += fmt(" %zu->%zu", pre, post);
  }
  const bool pass = pairs == kPairs && worse == 0 && strict >= kStrict;
  return {pass, fmt("%d low-overlap pairs, %d strictly gained (>= %d), %d lost; counts", pairs, strict, kStrict, worse) +
                    counts};
}

struct Variant {
  const char* name;
  bool scaling, focus, enhance;
};

Outcome ablation() {
  constexpr int kSeeds = 8, kTrials = 6;
  const std::array<Variant, 5> variants{{{"full", true, true, true},
                                         {"no-scaling", false, true, true},
                                         {"no-focus", true, false, true},
                                         {"no-enhance", true, true, false},
                                         {"none", false, false, false}}};
  std::array<double, 5> er{}, et{};
  std::array<std::size_t, 5> n{};
  for (int s = 1; s <= kSeeds; ++s) {
    RunConfig base;
    base.seed = static_cast<std::uint64_t>(s);
    base.benchmark.trials = kTrials;
    base.apply_seed();
    const Scene scene = generate_scene(base.scene);
    for (std::size_t v = 0; v < variants.size(); ++v) {
      PipelineConfig pc = base.pipeline;
      pc.resolution_scaling = variants[v].scaling;
      pc.matcher.focus_enabled = variants[v].focus;
      pc.enhancement = variants[v].enhance;
      const auto rep = run_benchmark(scene.aerial, scene.terrestrial, scene.ground_truth, base.benchmark, pc);
      // Means over trials that produced a transform, successful or not.
      er[v] += rep.mean_completed.e_r * rep.mean_completed.count;
      et[v] += rep.mean_completed.e_t * rep.mean_completed.count;
      n[v] += rep.mean_completed.count;
    }
  }
  for (std::size_t v = 0; v < variants.size(); ++v) {
    er[v] = n[v] ? er[v] / n[v] : 180.0;
    et[v] = n[v] ? et[v] / n[v] : INFINITY;
  }
  bool pass = true;
  std::string detail;
  for (std::size_t v = 0; v < variants.size(); ++v)
    detail += fmt("%s%s e_r %.4f e_t %.4f (n=%zu)", v ? ", " : "", variants[v].name, er[v], et[v], n[v]);
  for (std::size_t v = 1; v <= 3; ++v) {
    if (er[v] < er[0] || et[v] < et[0]) {
      pass = false;
      detail += fmt("; %s lowers an error", variants[v].name);
    }
  }
  if (!(et[4] >= 2.0 * et[0])) {
    pass = false;
    detail += fmt("; all-off e_t ratio %.2f < 2", et[4] / et[0]);
  }
  return {pass, detail};
}

Outcome determinism() {
  testutil::TempDir dir;
  const std::string config = (dir / "small.json").string();
  testutil::spit(config,
                 R"({"seed": 3, "scene": {"extent_x": 240, "extent_y": 240, "building_count": 20, "target_overlap": 0.3}})");
  std::vector<std::string> diffs;
  int compared = 0;
  auto run = [&](const std::vector<std::string>& args) {
    const auto r = testutil::run_cli(args);
    if (r.status != 0) diffs.push_back(fmt("exit %d: %s", r.status, r.err.c_str()));
  };
  auto same = [&](const std::string& a, const std::string& b) {
    ++compared;
    const auto x = testutil::slurp(dir / a), y = testutil::slurp(dir / b);
    if (x.empty() || x != y) diffs.push_back(a + " vs " + b);
  };
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  for (const char* tag : {"1", "2"}) {
    const std::string sub = p(std::string("synth") + tag);
    std::filesystem::create_directories(sub);
    run({"synth", "--config", config, "--out-dir", sub});
  }
  for (const char* f : {"aerial.ply", "terrestrial.ply", "scene.json"})
    same(std::string("synth1/") + f, std::string("synth2/") + f);
  const std::string aerial = p("synth1/aerial.ply"), terrestrial = p("synth1/terrestrial.ply");
  for (const char* tag : {"1", "2"}) {
    const std::string t = tag;
    run({"register", aerial, terrestrial, "--config", config, "--out", p("reg" + t + ".json"), "--transform-out",
         p("tr" + t + ".json"), "--matches-out", p("m" + t + ".json")});
    run({"bev", terrestrial, "--out", p("bev" + t + ".pgm"), "--raw-out", p("raw" + t + ".pgm")});
    run({"matchviz", p("bev1.pgm"), p("bev1.pgm"), "--out", p("viz" + t + ".pgm"), "--matches-out", p("vm" + t + ".json")});
  }
  for (const char* f : {"reg", "tr", "m", "vm"}) same(std::string(f) + "1.json", std::string(f) + "2.json");
  for (const char* f : {"bev", "raw", "viz"}) same(std::string(f) + "1.pgm", std::string(f) + "2.pgm");
  same("bev1.json", "bev2.json");
  for (const char* jobs : {"1", "8"}) {
    const std::string j = jobs;
    run({"bench", "--config", config, "--trials", "8", "--jobs", j, "--out", p("bench" + j + ".json"), "--csv",
         p("bench" + j + ".csv")});
  }
  run({"bench", "--config", config, "--trials", "8", "--jobs", "1", "--out", p("bench1b.json"), "--csv", p("bench1b.csv")});
  same("bench1.json", "bench8.json");
  same("bench1.csv", "bench8.csv");
  same("bench1.json", "bench1b.json");
  same("bench1.csv", "bench1b.csv");
  std::string detail = fmt("%d output pairs compared", compared);
  for (const auto& d : diffs) detail += "; " + d;
  return {diffs.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks{
      {"1 kabsch-oracle", kabsch_oracle},
      {"2 outlier-rejection", outlier_rejection},
      {"3 raster-lift-round-trip", raster_round_trip},
      {"4 metric-identities", metric_identities},
      {"5 enhancement", enhancement},
      {"6 synthetic-end-to-end", synthetic_end_to_end},
      {"7 focus-gain", focus_gain},
      {"8 ablation", ablation},
      {"9 determinism", determinism},
  };
  const std::string only = argc > 1 ? argv[1] : "";
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    if (!only.empty() && std::string(name).rfind(only + " ", 0) != 0) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << fmt(" [%.1f s]", seconds_since(t0)) << std::endl;
  }
  return failed ? 1 : 0;
}
