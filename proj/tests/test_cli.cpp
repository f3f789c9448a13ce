#include "test_util.hpp"

using testutil::run_cli;
using testutil::slurp;
using testutil::spit;
using namespace mtpcr;

namespace {

const char* kSmallConfig =
    R"({"seed": 5, "scene": {"extent_x": 240, "extent_y": 240, "building_count": 20, "target_overlap": 0.3}})";

/// Synthetic scene written once by the CLI and shared by the tests below.
struct Fixture {
  testutil::TempDir dir;
  std::string config, aerial, terrestrial, manifest;
  Fixture() {
    config = (dir / "small.json").string();
    spit(config, kSmallConfig);
    const auto r = run_cli({"synth", "--config", config, "--out-dir", dir.path.string()});
    EXPECT_EQ(r.status, 0) << r.err;
    aerial = (dir / "aerial.ply").string();
    terrestrial = (dir / "terrestrial.ply").string();
    manifest = (dir / "scene.json").string();
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST(CliRegister, SelfPair) {
  const auto& f = fixture();
  testutil::TempDir dir;
  const auto out = (dir / "report.json").string();
  const auto r = run_cli({"register", f.terrestrial, f.terrestrial, "--out", out});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(out));
  const auto T = transform_from_json(j["transform"]);
  EXPECT_LT(rotation_angle_deg(T.R), 0.1);
  EXPECT_LT(T.t.norm(), 0.1);
}

TEST(CliRegister, MissingFileLeavesNoOutputs) {
  const auto& f = fixture();
  testutil::TempDir dir;
  const auto out = dir / "report.json", tr = dir / "t.json";
  const auto r = run_cli({"register", (dir / "nope.xyz").string(), f.terrestrial, "--out", out.string(),
                          "--transform-out", tr.string()});
  EXPECT_EQ(r.status, 12);
  EXPECT_FALSE(std::filesystem::exists(out));
  EXPECT_FALSE(std::filesystem::exists(tr));
  EXPECT_FALSE(r.err.empty());
}

TEST(CliRegister, PlantedTransformMetricsMatchEmittedTransform) {
  const auto& f = fixture();
  testutil::TempDir dir;
  const auto aerial = load_cloud(f.aerial);
  const auto T = RigidTransform::from(testutil::rot_z(40), {15, -10, 2});
  const auto moved = (dir / "moved.ply").string();
  write_file(moved, format_ply(apply_transform(aerial, T), true));
  const auto gt_path = (dir / "gt.json").string();
  spit(gt_path, transform_to_json(T.inverse()).dump());
  const auto out = (dir / "r.json").string(), tr = (dir / "t.json").string();
  const auto r = run_cli({"register", moved, f.terrestrial, "--ground-truth", gt_path, "--out", out,
                          "--transform-out", tr});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(out));
  const auto est = transform_from_json(nlohmann::json::parse(slurp(tr)));
  const auto gt = transform_from_json(nlohmann::json::parse(slurp(gt_path)));
  const auto d = residual_transform(est, gt);
  EXPECT_NEAR(j["metrics"]["e_r_deg"].get<double>(), rotation_angle_deg(d.R), 1e-9);
  EXPECT_NEAR(j["metrics"]["e_t_m"].get<double>(), d.t.norm(), 1e-9);
  EXPECT_LT(j["metrics"]["e_r_deg"].get<double>(), 5.0);
  EXPECT_LT(j["metrics"]["e_t_m"].get<double>(), 2.0);
}

TEST(CliBev, TwoPointRasterPixelExact) {
  testutil::TempDir dir;
  spit(dir / "two.xyz", "0 0 0\n2.4 1.2 5\n");
  const auto out = (dir / "bev.pgm").string();
  const auto r = run_cli({"bev", (dir / "two.xyz").string(), "--out", out, "--no-align", "--res", "1", "--no-enhance"});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto img = decode_image(out);
  ASSERT_EQ(img.width, 4);
  ASSERT_EQ(img.height, 3);
  for (int v = 0; v < 3; ++v)
    for (int u = 0; u < 4; ++u) EXPECT_EQ(img.at(u, v), (u == 3 && v == 2) ? 255 : 0) << u << "," << v;
  const auto meta = nlohmann::json::parse(slurp(dir / "bev.json"));
  EXPECT_EQ(meta["width"], 4);
  EXPECT_EQ(meta["enhanced"], false);
}

TEST(CliBev, RawOutMatchesUnenhanced) {
  testutil::TempDir dir;
  spit(dir / "two.xyz", "0 0 0\n2.4 1.2 5\n");
  const auto a = (dir / "a.pgm").string(), raw = (dir / "raw.pgm").string(), b = (dir / "b.pgm").string();
  ASSERT_EQ(run_cli({"bev", (dir / "two.xyz").string(), "--out", a, "--raw-out", raw, "--no-align", "--res", "1"}).status, 0);
  ASSERT_EQ(run_cli({"bev", (dir / "two.xyz").string(), "--out", b, "--no-align", "--res", "1", "--no-enhance"}).status, 0);
  EXPECT_EQ(slurp(raw), slurp(b));
  EXPECT_EQ(slurp(a), encode_pgm(enhance(decode_image(b))));
}

TEST(CliBev, Errors) {
  testutil::TempDir dir;
  EXPECT_EQ(run_cli({"bev", (dir / "nope.xyz").string(), "--out", (dir / "x.pgm").string()}).status, 12);
  spit(dir / "bad.xyz", "1 2\n");
  EXPECT_EQ(run_cli({"bev", (dir / "bad.xyz").string(), "--out", (dir / "x.pgm").string()}).status, 10);
  spit(dir / "two.xyz", "0 0 0\n2.4 1.2 5\n");
  EXPECT_EQ(run_cli({"bev", (dir / "two.xyz").string(), "--out", (dir / "x.pgm").string(), "--res", "0"}).status, 13);
  EXPECT_FALSE(std::filesystem::exists(dir / "x.pgm"));
}

TEST(CliSynth, DeterministicAndRecomputable) {
  const auto& f = fixture();
  testutil::TempDir dir;
  const auto r = run_cli({"synth", "--config", f.config, "--out-dir", dir.path.string()});
  ASSERT_EQ(r.status, 0) << r.err;
  for (const char* name : {"aerial.ply", "terrestrial.ply", "scene.json"})
    EXPECT_EQ(slurp(dir / name), slurp(f.dir / name)) << name;
  const auto m = nlohmann::json::parse(slurp(f.manifest));
  const auto ov = compute_overlap_ratio(load_cloud(f.aerial), load_cloud(f.terrestrial), m["overlap_radius_m"]);
  EXPECT_NEAR(ov.target, m["realized_overlap"].get<double>(), 1e-3);
  EXPECT_NEAR(ov.target, 0.3, 0.05);
}

TEST(CliSynth, Unsatisfiable) {
  const auto& f = fixture();
  testutil::TempDir dir;
  spit(dir / "c.json",
       R"({"scene": {"extent_x": 240, "extent_y": 240, "building_count": 20, "overlap_tolerance": 0.001,
          "aerial_coverage": [[-120, -120], [-110, -120], [-110, 120], [-120, 120]]}})");
  const auto r = run_cli({"synth", "--config", (dir / "c.json").string(), "--out-dir", dir.path.string(),
                          "--target-overlap", "0.99"});
  EXPECT_EQ(r.status, 23) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "scene.json"));
  (void)f;
}

TEST(CliBench, DeterministicCsvAndSrr) {
  const auto& f = fixture();
  testutil::TempDir dir;
  const auto a = (dir / "a.csv").string(), b = (dir / "b.csv").string(), ja = (dir / "a.json").string(),
             jb = (dir / "b.json").string();
  ASSERT_EQ(run_cli({"bench", "--config", f.config, "--trials", "3", "--csv", a, "--out", ja}).status, 0);
  ASSERT_EQ(run_cli({"bench", "--config", f.config, "--trials", "3", "--csv", b, "--out", jb, "--jobs", "3"}).status, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(slurp(ja), slurp(jb));
  std::istringstream csv(slurp(a));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "trial,e_r_deg,e_t_m,rmsd_m,success");
  int rows = 0, ok = 0;
  while (std::getline(csv, line)) {
    ++rows;
    ok += line.back() == '1';
  }
  ASSERT_EQ(rows, 3);
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(slurp(ja))["srr"].get<double>(), ok / 3.0);
}

TEST(CliBench, UsageErrors) {
  EXPECT_EQ(run_cli({"bench", "--trials", "abc"}).status, 24);
  EXPECT_EQ(run_cli({"bench", "--trials", ""}).status, 24);
  EXPECT_EQ(run_cli({"bench", "--trials", "0"}).status, 13);
  EXPECT_EQ(run_cli({"bench", "--source", "x.xyz"}).status, 24);
  EXPECT_EQ(run_cli({}).status, 24);
  EXPECT_EQ(run_cli({"frobnicate"}).status, 24);
}

TEST(CliMatchviz, SelfMatchLinesAreHorizontal) {
  const auto& f = fixture();
  testutil::TempDir dir;
  const auto img = (dir / "t.pgm").string();
  ASSERT_EQ(run_cli({"bev", f.terrestrial, "--out", img}).status, 0);
  const auto out = (dir / "viz.pgm").string(), mo = (dir / "m.json").string();
  const auto r = run_cli({"matchviz", img, img, "--out", out, "--matches-out", mo});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(mo));
  ASSERT_FALSE(j["matches"].empty());
  const auto a = decode_image(img);
  const auto viz = decode_image(out);
  EXPECT_EQ(viz.width, 2 * a.width);
  EXPECT_EQ(viz.height, a.height);
  for (const auto& m : j["matches"]) {
    EXPECT_EQ(m["v0"], m["v1"]);
    EXPECT_EQ(m["u0"], m["u1"]);
    const int u0 = static_cast<int>(std::lround(m["u0"].get<double>()));
    const int v0 = static_cast<int>(std::lround(m["v0"].get<double>()));
    const int u1 = a.width + static_cast<int>(std::lround(m["u1"].get<double>()));
    for (int u = u0; u <= u1; ++u) EXPECT_EQ(viz.at(u, v0), 255);
  }
}

TEST(CliMatchviz, EndpointsFollowGivenMatches) {
  testutil::TempDir dir;
  ImageU8 a(40, 30), b(50, 20);
  spit(dir / "a.pgm", encode_pgm(a));
  spit(dir / "b.pgm", encode_pgm(b));
  spit(dir / "m.json", R"({"matches": [{"u0": 3.2, "v0": 4.7, "u1": 10.4, "v1": 15.1, "score": 1}]})");
  const auto out = (dir / "viz.pgm").string();
  const auto r = run_cli({"matchviz", (dir / "a.pgm").string(), (dir / "b.pgm").string(), "--out", out, "--matches",
                          (dir / "m.json").string()});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto viz = decode_image(out);
  ASSERT_EQ(viz.width, 90);
  ASSERT_EQ(viz.height, 30);
  auto lit_near = [&](double u, double v) {
    for (int dv = -1; dv <= 1; ++dv)
      for (int du = -1; du <= 1; ++du) {
        const int x = static_cast<int>(std::lround(u)) + du, y = static_cast<int>(std::lround(v)) + dv;
        if (viz.contains(x, y) && viz.at(x, y) == 255) return true;
      }
    return false;
  };
  EXPECT_TRUE(lit_near(3.2, 4.7));
  EXPECT_TRUE(lit_near(40 + 10.4, 15.1));
  int lit = 0;
  for (auto p : viz.data) lit += p == 255;
  EXPECT_GE(lit, 12);
}

TEST(CliMatchviz, ZeroMatchesWarns) {
  testutil::TempDir dir;
  ImageU8 a(40, 30);
  spit(dir / "a.pgm", encode_pgm(a));
  const auto r = run_cli({"matchviz", (dir / "a.pgm").string(), (dir / "a.pgm").string(), "--out",
                          (dir / "viz.pgm").string()});
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "viz.pgm"));
}

TEST(CliConfig, PrecedenceDefaultsFileFlags) {
  const auto& f = fixture();
  testutil::TempDir dir;
  spit(dir / "c.json", R"({"seed": 5, "pipeline": {"gamma": 2.0, "matcher": {"focus_threshold": 0.4}}})");
  const auto out = (dir / "r.json").string();
  const auto r = run_cli({"register", f.terrestrial, f.terrestrial, "--config", (dir / "c.json").string(),
                          "--seed", "6", "--out", out});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto c = nlohmann::json::parse(slurp(out))["config"];
  EXPECT_EQ(c["seed"], 6);                                            // flag over file
  EXPECT_EQ(c["pipeline"]["gamma"], 2.0);                             // file over default
  EXPECT_EQ(c["pipeline"]["matcher"]["focus_threshold"], 0.4);
  EXPECT_EQ(c["pipeline"]["enhancement"], true);                      // default
  EXPECT_EQ(c["benchmark"]["trials"], BenchmarkConfig{}.trials);
  EXPECT_FALSE(c["benchmark"].contains("jobs"));
}

TEST(CliConfig, ExitCodes) {
  testutil::TempDir dir;
  spit(dir / "unknown.json", R"({"nope": 1})");
  EXPECT_EQ(run_cli({"bench", "--config", (dir / "unknown.json").string()}).status, 10);
  EXPECT_EQ(run_cli({"bench", "--config", (dir / "missing.json").string()}).status, 12);
  EXPECT_EQ(run_cli({"bench", "--gamma", "0"}).status, 13);
  spit(dir / "empty.xyz", "# nothing\n");
  EXPECT_EQ(run_cli({"bev", (dir / "empty.xyz").string(), "--out", (dir / "x.pgm").string()}).status, 11);
  const auto help = run_cli({"--help"});
  EXPECT_EQ(help.status, 0);
  EXPECT_NE(help.out.find("23 UnsatisfiableOverlap"), std::string::npos) << help.out;
}
