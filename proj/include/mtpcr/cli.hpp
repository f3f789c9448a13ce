#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtpcr/config.hpp"
#include "mtpcr/image_io.hpp"
#include "mtpcr/mtpcr.hpp"

namespace mtpcr::cli {

/// Files of one command, written only once every output has been produced.
/// Each file goes to a temporary sibling first and is renamed into place.
class OutputSet {
 public:
  void add(std::filesystem::path path, std::string data) { files_.emplace_back(std::move(path), std::move(data)); }

  void commit() {
    std::vector<std::filesystem::path> temps;
    try {
      for (const auto& [path, data] : files_) {
        auto tmp = path;
        tmp += ".tmp" + std::to_string(::getpid());
        write_file(tmp, data);
        temps.push_back(tmp);
      }
      for (std::size_t i = 0; i < files_.size(); ++i) {
        std::error_code ec;
        std::filesystem::rename(temps[i], files_[i].first, ec);
        if (ec) throw Error(ErrorCode::kIo, "cannot move output into '" + files_[i].first.string() + "': " + ec.message());
      }
    } catch (...) {
      for (const auto& t : temps) {
        std::error_code ec;
        std::filesystem::remove(t, ec);
      }
      throw;
    }
  }

 private:
  std::vector<std::pair<std::filesystem::path, std::string>> files_;
};

inline std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

inline nlohmann::json read_json(const std::filesystem::path& path) {
  auto j = nlohmann::json::parse(detail::read_file(path), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::kParse, path.string() + ": malformed JSON");
  return j;
}

inline std::string format_cloud(const std::filesystem::path& name, const PointCloud& cloud) {
  return format_from_path(name) == CloudFormat::kPly ? format_ply(cloud, true) : format_xyz(cloud);
}

/// Flag values; unset flags leave the config file (or default) value alone.
struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::optional<double> focus_threshold;
  std::optional<double> sigma_r;
  std::optional<double> sigma_t;
  std::optional<int> trials;
  std::optional<int> jobs;
  bool no_enhance = false;
  bool no_focus = false;
  bool no_scaling = false;
};

/// defaults < config file < flags; component seeds follow the final seed.
inline RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg = o.config ? load_run_config(*o.config) : RunConfig{};
  if (o.seed) cfg.seed = *o.seed;
  if (o.gamma) cfg.pipeline.gamma = *o.gamma;
  if (o.focus_threshold) cfg.pipeline.matcher.focus_threshold = *o.focus_threshold;
  if (o.sigma_r) cfg.benchmark.sigma_r = *o.sigma_r;
  if (o.sigma_t) cfg.benchmark.sigma_t = *o.sigma_t;
  if (o.trials) cfg.benchmark.trials = *o.trials;
  if (o.jobs) cfg.benchmark.jobs = *o.jobs;
  if (o.no_enhance) cfg.pipeline.enhancement = false;
  if (o.no_focus) cfg.pipeline.matcher.focus_enabled = false;
  if (o.no_scaling) cfg.pipeline.resolution_scaling = false;
  cfg.apply_seed();
  cfg.validate();
  return cfg;
}

/// Effective configuration for reports. Parallelism is left out so that the
/// output does not depend on --jobs.
inline nlohmann::ordered_json config_for_report(const RunConfig& cfg) {
  auto j = run_config_to_json(cfg);
  j["benchmark"].erase("jobs");
  return j;
}

inline void add_config_flags(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config, "JSON run configuration (flags override it)");
  app.add_option("--seed", o.seed, "Seed for all randomness");
}

inline void add_pipeline_flags(CLI::App& app, Overrides& o) {
  app.add_option("--gamma", o.gamma, "Resolution multiplier gamma");
  app.add_option("--focus-threshold", o.focus_threshold, "Estimated overlap below which FOCUS runs");
  app.add_flag("--no-enhance", o.no_enhance, "Skip the high-pass enhancement");
  app.add_flag("--no-focus", o.no_focus, "Skip the FOCUS pass");
  app.add_flag("--no-scaling", o.no_scaling, "Rasterize at one pixel per meter");
}

// ---------------------------------------------------------------------------
// register

struct RegisterArgs {
  std::string source, target;
  std::optional<std::string> out, transform_out, matches_out, ground_truth;
  bool timings = false;
};

inline int cmd_register(const RegisterArgs& a, const Overrides& o) {
  const RunConfig cfg = resolve_config(o);
  const PointCloud source = load_cloud(a.source);
  const PointCloud target = load_cloud(a.target);
  std::optional<RigidTransform> gt;
  if (a.ground_truth) gt = transform_from_json(read_json(*a.ground_truth));

  const RegistrationReport rep = register_clouds(source, target, cfg.pipeline);
  auto j = report_to_json(rep, a.timings);
  if (gt) {
    const auto m = score_registration(source, rep.transform, *gt, cfg.benchmark.sigma_r, cfg.benchmark.sigma_t);
    j["metrics"] = {{"e_r_deg", m.e_r}, {"e_t_m", m.e_t}, {"rmsd_m", m.rmsd}, {"success", m.success}};
  }
  j["config"] = config_for_report(cfg);

  OutputSet outs;
  if (a.transform_out) outs.add(*a.transform_out, dump(transform_to_json(rep.transform)));
  if (a.matches_out) outs.add(*a.matches_out, dump(match_set_to_json(rep.matching.matches)));
  if (a.out) outs.add(*a.out, dump(j));
  outs.commit();
  if (!a.out) std::cout << dump(j);
  return 0;
}

// ---------------------------------------------------------------------------
// bev

struct BevArgs {
  std::string cloud;
  std::string out;
  std::optional<std::string> raw_out, meta_out;
  std::optional<double> res;
  bool no_align = false;
};

inline int cmd_bev(const BevArgs& a, const Overrides& o) {
  const RunConfig cfg = resolve_config(o);
  const PointCloud cloud = load_cloud(a.cloud);
  PipelineConfig pc = cfg.pipeline;
  if (a.no_align) {
    pc.ground_alignment = false;
    pc.principal_axes = false;
  }
  if (a.res) {
    if (!(*a.res > 0.0)) throw Error(ErrorCode::kInvalidParameter, "--res must be > 0");
    pc.resolution_scaling = false;
  }
  PreparedCloud p = prepare_cloud(cloud, pc);
  if (a.res) {
    p.raster = rasterize(scale_cloud(p.aligned, *a.res), *a.res);
    p.image = pc.enhancement ? enhance(p.raster.G) : p.raster.G;
  }
  auto meta = raster_metadata(p.raster);
  meta["enhanced"] = pc.enhancement;
  meta["alignment"] = transform_to_json(p.alignment);

  OutputSet outs;
  outs.add(a.out, encode_pgm(p.image));
  if (a.raw_out) outs.add(*a.raw_out, encode_pgm(p.raster.G));
  std::filesystem::path meta_path = a.meta_out ? std::filesystem::path(*a.meta_out)
                                               : std::filesystem::path(a.out).replace_extension(".json");
  outs.add(meta_path, dump(meta));
  outs.commit();
  return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out_dir = ".";
  std::string aerial = "aerial.ply";
  std::string terrestrial = "terrestrial.ply";
  std::string manifest = "scene.json";
  std::optional<double> target_overlap;
};

inline int cmd_synth(const SynthArgs& a, const Overrides& o) {
  RunConfig cfg = resolve_config(o);
  if (a.target_overlap) cfg.scene.target_overlap = *a.target_overlap;
  cfg.validate();
  const Scene scene = generate_scene(cfg.scene);
  const std::filesystem::path dir = a.out_dir;
  auto manifest = scene_manifest(scene, cfg.scene);
  manifest["run_seed"] = cfg.seed;
  manifest["files"] = {{"aerial", a.aerial}, {"terrestrial", a.terrestrial}};
  OutputSet outs;
  outs.add(dir / a.aerial, format_cloud(a.aerial, scene.aerial));
  outs.add(dir / a.terrestrial, format_cloud(a.terrestrial, scene.terrestrial));
  outs.add(dir / a.manifest, dump(manifest));
  outs.commit();
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::optional<std::string> source, target, ground_truth;
  std::optional<std::string> out, csv;
};

inline int cmd_bench(const BenchArgs& a, const Overrides& o) {
  const RunConfig cfg = resolve_config(o);
  PointCloud source, target;
  RigidTransform gt;
  nlohmann::ordered_json inputs;
  if (a.source || a.target) {
    if (!a.source || !a.target) throw Error(ErrorCode::kUsage, "bench needs both --source and --target, or neither");
    source = load_cloud(*a.source);
    target = load_cloud(*a.target);
    if (a.ground_truth) gt = transform_from_json(read_json(*a.ground_truth));
    inputs = {{"source", *a.source}, {"target", *a.target}};
  } else {
    if (a.ground_truth) throw Error(ErrorCode::kUsage, "--ground-truth needs --source and --target");
    Scene scene = generate_scene(cfg.scene);
    source = std::move(scene.aerial);
    target = std::move(scene.terrestrial);
    gt = scene.ground_truth;
    inputs = {{"scene", "synthetic"}, {"realized_overlap", scene.realized_overlap}};
  }
  const auto rep = run_benchmark(source, target, gt, cfg.benchmark, cfg.pipeline);
  auto j = benchmark_to_json(rep, cfg.benchmark);
  j["inputs"] = inputs;
  j["run_config"] = config_for_report(cfg);

  OutputSet outs;
  if (a.csv) outs.add(*a.csv, benchmark_to_csv(rep));
  if (a.out) outs.add(*a.out, dump(j));
  outs.commit();
  if (!a.out) std::cout << dump(j);
  return 0;
}

// ---------------------------------------------------------------------------
// matchviz

struct MatchvizArgs {
  std::string image_a, image_b;
  std::string out;
  std::optional<std::string> matches_in, matches_out;
};

/// Straight line with value `value`, endpoints included.
inline void draw_line(ImageU8& img, int x0, int y0, int x1, int y1, std::uint8_t value) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (img.contains(x0, y0)) img.at(x0, y0) = value;
    if (x0 == x1 && y0 == y1) return;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

/// A and B side by side at half intensity with one full-intensity line per match.
inline ImageU8 match_composite(const ImageU8& a, const ImageU8& b, const MatchSet& ms) {
  ImageU8 out(a.width + b.width, std::max(a.height, b.height));
  for (int v = 0; v < a.height; ++v)
    for (int u = 0; u < a.width; ++u) out.at(u, v) = a.at(u, v) / 2;
  for (int v = 0; v < b.height; ++v)
    for (int u = 0; u < b.width; ++u) out.at(a.width + u, v) = b.at(u, v) / 2;
  for (const auto& m : ms.pairs) {
    draw_line(out, static_cast<int>(std::lround(m.source.u)), static_cast<int>(std::lround(m.source.v)),
              a.width + static_cast<int>(std::lround(m.target.u)), static_cast<int>(std::lround(m.target.v)), 255);
  }
  return out;
}

inline int cmd_matchviz(const MatchvizArgs& a, const Overrides& o) {
  const RunConfig cfg = resolve_config(o);
  const ImageU8 ia = decode_image(a.image_a);
  const ImageU8 ib = decode_image(a.image_b);
  MatchSet ms;
  if (a.matches_in) {
    ms = match_set_from_json(read_json(*a.matches_in), ia.width, ia.height, ib.width, ib.height);
  } else {
    ms = match_pipeline(ia, ib, cfg.pipeline.matcher);
  }
  if (ms.empty()) std::cerr << "warning: no matches; composite has no lines\n";
  OutputSet outs;
  outs.add(a.out, encode_pgm(match_composite(ia, ib, ms)));
  if (a.matches_out) outs.add(*a.matches_out, dump(match_set_to_json(ms)));
  outs.commit();
  return 0;
}

// ---------------------------------------------------------------------------

inline std::string exit_code_table() {
  std::string s = "Exit codes: 0 success, 1 unexpected failure";
  for (int c = 0; c <= static_cast<int>(ErrorCode::kUsage); ++c) {
    const auto code = static_cast<ErrorCode>(c);
    s += ", " + std::to_string(exit_code(code)) + " " + std::string(to_string(code));
  }
  return s;
}

/// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Registration of aerial and terrestrial point clouds through bird's-eye-view matching"};
  app.footer(exit_code_table());
  app.require_subcommand(1);

  Overrides o;
  RegisterArgs reg;
  auto* c_reg = app.add_subcommand("register", "Estimate the transform taking SOURCE onto TARGET");
  c_reg->add_option("source", reg.source, "Source cloud (.xyz or .ply)")->required();
  c_reg->add_option("target", reg.target, "Target cloud (.xyz or .ply)")->required();
  c_reg->add_option("--out", reg.out, "Report JSON (default: stdout)");
  c_reg->add_option("--transform-out", reg.transform_out, "Transform JSON");
  c_reg->add_option("--matches-out", reg.matches_out, "Final 2D matches JSON");
  c_reg->add_option("--ground-truth", reg.ground_truth, "Transform JSON to score against");
  c_reg->add_flag("--timings", reg.timings, "Include stage timings (not byte-stable)");
  add_config_flags(*c_reg, o);
  add_pipeline_flags(*c_reg, o);

  BevArgs bev;
  auto* c_bev = app.add_subcommand("bev", "Rasterize a cloud to a bird's-eye-view graymap");
  c_bev->add_option("cloud", bev.cloud, "Input cloud")->required();
  c_bev->add_option("--out", bev.out, "Output graymap (.pgm)")->required();
  c_bev->add_option("--raw-out", bev.raw_out, "Graymap before enhancement");
  c_bev->add_option("--meta-out", bev.meta_out, "Metadata JSON (default: OUT with .json)");
  c_bev->add_option("--res", bev.res, "Fixed scale in pixels per meter instead of the density-derived one");
  c_bev->add_flag("--no-align", bev.no_align, "Keep the input frame (no ground or heading alignment)");
  add_config_flags(*c_bev, o);
  add_pipeline_flags(*c_bev, o);

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "Generate a synthetic aerial/terrestrial scene");
  c_syn->add_option("--out-dir", syn.out_dir, "Output directory")->check(CLI::ExistingDirectory);
  c_syn->add_option("--aerial", syn.aerial, "Aerial cloud file name");
  c_syn->add_option("--terrestrial", syn.terrestrial, "Terrestrial cloud file name");
  c_syn->add_option("--manifest", syn.manifest, "Scene manifest file name");
  c_syn->add_option("--target-overlap", syn.target_overlap, "Requested overlap ratio");
  add_config_flags(*c_syn, o);

  BenchArgs ben;
  auto* c_ben = app.add_subcommand("bench", "Random-perturbation benchmark on a cloud pair or a synthetic scene");
  c_ben->add_option("--source", ben.source, "Source cloud (default: synthetic aerial)");
  c_ben->add_option("--target", ben.target, "Target cloud (default: synthetic terrestrial)");
  c_ben->add_option("--ground-truth", ben.ground_truth, "Source-to-target transform JSON (default: identity)");
  c_ben->add_option("--out", ben.out, "Aggregate JSON (default: stdout)");
  c_ben->add_option("--csv", ben.csv, "Per-trial CSV");
  c_ben->add_option("--trials", o.trials, "Number of trials");
  c_ben->add_option("--jobs", o.jobs, "Parallel trials");
  c_ben->add_option("--sigma-r", o.sigma_r, "Rotation success threshold (degrees)");
  c_ben->add_option("--sigma-t", o.sigma_t, "Translation success threshold (meters)");
  add_config_flags(*c_ben, o);
  add_pipeline_flags(*c_ben, o);

  MatchvizArgs viz;
  auto* c_viz = app.add_subcommand("matchviz", "Side-by-side match overlay of two graymaps");
  c_viz->add_option("image_a", viz.image_a, "First graymap")->required();
  c_viz->add_option("image_b", viz.image_b, "Second graymap")->required();
  c_viz->add_option("--out", viz.out, "Composite graymap")->required();
  c_viz->add_option("--matches", viz.matches_in, "Draw these matches instead of matching");
  c_viz->add_option("--matches-out", viz.matches_out, "Matches JSON");
  add_config_flags(*c_viz, o);
  add_pipeline_flags(*c_viz, o);

  // CLI11 treats an empty value as unset; reject it instead of silently using the default.
  for (int i = 1; i < argc; ++i) {
    const std::string_view arg = argv[i];
    if (arg.empty() || (arg.starts_with("--") && arg.ends_with("="))) {
      std::cerr << "UsageError: empty value in argument " << i << "\n";
      return exit_code(ErrorCode::kUsage);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "UsageError: " << e.what() << "\n";
    return exit_code(ErrorCode::kUsage);
  }

  try {
    if (*c_reg) return cmd_register(reg, o);
    if (*c_bev) return cmd_bev(bev, o);
    if (*c_syn) return cmd_synth(syn, o);
    if (*c_ben) return cmd_bench(ben, o);
    if (*c_viz) return cmd_matchviz(viz, o);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << "\n";
    return 1;
  }
  return exit_code(ErrorCode::kUsage);
}

}  // namespace mtpcr::cli
