#include "test_util.hpp"

using namespace mtpcr;

namespace {

const Scene& small_scene() {
  static const Scene scene = generate_scene(testutil::small_scene_spec());
  return scene;
}

double deg_error(const RigidTransform& est, const RigidTransform& gt) {
  return rotation_angle_deg(residual_transform(est, gt).R);
}

double m_error(const RigidTransform& est, const RigidTransform& gt) { return residual_transform(est, gt).t.norm(); }

}  // namespace

TEST(Pipeline, SelfRegistration) {
  const auto& c = small_scene().terrestrial;
  const auto rep = register_clouds(c, c);
  EXPECT_LT(deg_error(rep.transform, RigidTransform::identity()), 0.1);
  EXPECT_LT(m_error(rep.transform, RigidTransform::identity()), 0.1);
  EXPECT_GE(rep.correspondences, 3u);
}

TEST(Pipeline, YawAndShift) {
  const auto& s = small_scene();
  const auto T = RigidTransform::from(testutil::rot_z(30), {20, 0, 0});
  const auto moved = apply_transform(s.aerial, T);
  const auto rep = register_clouds(moved, s.terrestrial);
  const auto gt = s.ground_truth * T.inverse();
  EXPECT_LT(deg_error(rep.transform, gt), 0.5);
  EXPECT_LT(m_error(rep.transform, gt), 2.0 / rep.target.res);
}

TEST(Pipeline, PlantedTransform) {
  const auto& s = small_scene();
  std::mt19937_64 rng(301);
  BenchmarkConfig bc;
  const auto T = sample_random_transform(bc, rng);
  const auto rep = register_clouds(apply_transform(s.aerial, T), s.terrestrial);
  const auto gt = s.ground_truth * T.inverse();
  EXPECT_LT(deg_error(rep.transform, gt), 5.0);
  EXPECT_LT(m_error(rep.transform, gt), 2.0);
}

TEST(Pipeline, FlatPlaneFailsWithStage) {
  PointCloud flat;
  for (int i = 0; i < 80; ++i)
    for (int j = 0; j < 80; ++j) flat.points.emplace_back(i * 0.5, j * 0.5, 0.0);
  try {
    register_clouds(flat, flat);
    ADD_FAILURE() << "flat plane registered";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTooFewCorrespondences) << e.what();
    EXPECT_FALSE(e.stage().empty());
  }
}

TEST(Pipeline, EmptyInputs) {
  const auto& c = small_scene().terrestrial;
  testutil::expect_error([&] { register_clouds(PointCloud{}, c); }, ErrorCode::kEmptyCloud);
  testutil::expect_error([&] { register_clouds(c, PointCloud{}); }, ErrorCode::kEmptyCloud);
}

TEST(Pipeline, ReportJson) {
  const auto& c = small_scene().terrestrial;
  const auto rep = register_clouds(c, c);
  const auto j = nlohmann::json::parse(report_to_json(rep).dump());
  EXPECT_EQ(j["schema"], "mtpcr-report/1");
  EXPECT_EQ(j["stages"]["lift"]["correspondences"], rep.correspondences);
  EXPECT_EQ(j["stages"]["match"]["final"], rep.matching.matches.size());
  EXPECT_FALSE(j["stages"].contains("seconds"));
  EXPECT_TRUE(report_to_json(rep, true)["stages"].contains("seconds"));
  const auto back = transform_from_json(j["transform"]);
  EXPECT_EQ(back.R, rep.transform.R);
  EXPECT_EQ(back.t, rep.transform.t);
}

TEST(Pipeline, TransformJsonRoundTrip) {
  std::mt19937_64 rng(302);
  const auto T = testutil::random_transform(rng);
  const auto back = transform_from_json(nlohmann::json::parse(transform_to_json(T).dump()));
  EXPECT_EQ(back.R, T.R);
  EXPECT_EQ(back.t, T.t);
  testutil::expect_error([] { transform_from_json(nlohmann::json::parse(R"({"R": [[1,0,0]], "t": [0,0,0]})")); },
                         ErrorCode::kParse);
  testutil::expect_error([] { transform_from_json(nlohmann::json::parse(R"({"t": "x"})")); }, ErrorCode::kParse);
}

TEST(Pipeline, ElevationRelativeToGround) {
  const BevRaster r = rasterize(scale_cloud(PointCloud({Point3(0, 0, 3), Point3(4, 2, 8)}), 2.0), 2.0);
  const auto e = elevation_meters(r, 3.0);
  EXPECT_EQ(e.at(0, 0), 0.0);
  EXPECT_EQ(e.at(8, 4), 5.0);
  EXPECT_TRUE(std::isnan(e.at(1, 1)));
}

TEST(Pipeline, InvalidConfig) {
  PipelineConfig cfg;
  cfg.gamma = 0;
  const auto& c = small_scene().terrestrial;
  testutil::expect_error([&] { register_clouds(c, c, cfg); }, ErrorCode::kInvalidParameter);
  cfg = {};
  cfg.max_height_offset = -1;
  testutil::expect_error([&] { register_clouds(c, c, cfg); }, ErrorCode::kInvalidParameter);
}
