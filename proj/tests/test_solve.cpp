#include "test_util.hpp"

using namespace mtpcr;

namespace {

CorrespondenceSet planted(const PointCloud& src, const RigidTransform& T) {
  CorrespondenceSet cs;
  for (const auto& p : src.points) cs.push_back({p, T(p), 1.0});
  return cs;
}

/// Smooth non-planar surface sampled on a regular grid.
PointCloud wavy_surface(double half, double step) {
  PointCloud c;
  for (double x = -half; x <= half; x += step)
    for (double y = -half; y <= half; y += step)
      c.points.emplace_back(x, y, 3.0 * std::sin(x / 5.0) * std::cos(y / 7.0) + 0.05 * x);
  return c;
}

}  // namespace

TEST(Kabsch, QuarterTurnAboutZ) {
  const CorrespondenceSet cs{{Point3(1, 0, 0), Point3(0, 1, 0), 1},
                             {Point3(0, 1, 0), Point3(-1, 0, 0), 1},
                             {Point3(0, 0, 1), Point3(0, 0, 1), 1}};
  const auto T = kabsch(cs);
  EXPECT_LT((T.R - testutil::rot_z(90)).norm(), 1e-12);
  EXPECT_LT(T.t.norm(), 1e-12);
}

TEST(Kabsch, RandomPlantedTransform) {
  std::mt19937_64 rng(81);
  for (int k = 0; k < 20; ++k) {
    const auto T = testutil::random_transform(rng);
    const auto est = kabsch(planted(testutil::random_cloud(rng, 100), T));
    EXPECT_LT((est.R - T.R).norm(), 1e-9);
    EXPECT_LT((est.t - T.t).norm(), 1e-9);
    EXPECT_TRUE(est.is_valid(1e-9));
  }
}

TEST(Kabsch, CoplanarSourceIsProperRotation) {
  std::mt19937_64 rng(82);
  auto src = testutil::random_cloud(rng, 50);
  for (auto& p : src.points) p.z() = 0.0;
  const auto T = testutil::random_transform(rng);
  const auto est = kabsch(planted(src, T));
  EXPECT_NEAR(est.R.determinant(), 1.0, 1e-9);
  EXPECT_LT((est.R - T.R).norm(), 1e-9);
}

TEST(Kabsch, Errors) {
  const CorrespondenceSet two{{Point3(0, 0, 0), Point3(0, 0, 0), 1}, {Point3(1, 0, 0), Point3(1, 0, 0), 1}};
  testutil::expect_error([&] { kabsch(two); }, ErrorCode::kTooFewCorrespondences);
  CorrespondenceSet line;
  for (int i = 0; i < 3; ++i) line.push_back({Point3(i, 2 * i, 0), Point3(i, 2 * i, 0), 1});
  testutil::expect_error([&] { kabsch(line); }, ErrorCode::kDegenerateConfiguration);
}

TEST(Kabsch, OrderInvariant) {
  std::mt19937_64 rng(83);
  const auto T = testutil::random_transform(rng);
  auto cs = planted(testutil::random_cloud(rng, 60), T);
  std::normal_distribution<double> g(0.0, 0.1);
  for (auto& c : cs) c.target += Point3(g(rng), g(rng), g(rng));
  const auto a = kabsch(cs);
  std::shuffle(cs.begin(), cs.end(), rng);
  const auto b = kabsch(cs);
  EXPECT_LT((a.R - b.R).norm(), 1e-12);
  EXPECT_LT((a.t - b.t).norm(), 1e-10);
}

TEST(Kabsch, EqualConfidencesMatchUnweighted) {
  std::mt19937_64 rng(84);
  auto cs = planted(testutil::random_cloud(rng, 40), testutil::random_transform(rng));
  std::normal_distribution<double> g(0.0, 0.2);
  for (auto& c : cs) c.target += Point3(g(rng), g(rng), g(rng));
  const auto a = kabsch(cs);
  for (auto& c : cs) c.confidence = 0.3;
  const auto b = kabsch(cs);
  EXPECT_LT((a.R - b.R).norm(), 1e-12);
  EXPECT_LT((a.t - b.t).norm(), 1e-10);
}

TEST(Kabsch, WeightsSuppressDownweightedPairs) {
  std::mt19937_64 rng(85);
  const auto T = testutil::random_transform(rng);
  auto cs = planted(testutil::random_cloud(rng, 30), T);
  cs[0].target += Point3(50, 0, 0);
  cs[0].confidence = 0.0;
  const auto est = kabsch(cs);
  EXPECT_LT((est.R - T.R).norm(), 1e-9);
}

TEST(RobustEstimate, AllInliersEqualsKabsch) {
  std::mt19937_64 rng(86);
  const auto cs = planted(testutil::random_cloud(rng, 80), testutil::random_transform(rng));
  const auto r = robust_estimate(cs);
  const auto k = kabsch(cs);
  EXPECT_EQ(r.transform.R, k.R);
  EXPECT_EQ(r.transform.t, k.t);
  EXPECT_EQ(r.inliers.size(), cs.size());
  EXPECT_EQ(r.diagnostics.inlier_counts, std::vector<std::size_t>{cs.size()});
}

TEST(RobustEstimate, ThirtyPercentOutliers) {
  std::mt19937_64 rng(87);
  const auto T = testutil::random_transform(rng);
  auto cs = planted(testutil::random_cloud(rng, 70), T);
  const auto junk = testutil::random_cloud(rng, 60);
  for (int i = 0; i < 30; ++i) cs.push_back({junk[static_cast<std::size_t>(i)], junk[static_cast<std::size_t>(30 + i)], 1.0});
  const auto r = robust_estimate(cs);
  EXPECT_LT((r.transform.R - T.R).norm(), 1e-6);
  EXPECT_LT((r.transform.t - T.t).norm(), 1e-6);
  EXPECT_EQ(r.inliers.size(), 70u);
  for (std::size_t i = 1; i < r.diagnostics.inlier_counts.size(); ++i)
    EXPECT_LE(r.diagnostics.inlier_counts[i], r.diagnostics.inlier_counts[i - 1]);
  EXPECT_LT(r.diagnostics.final_rms, 1e-9);
}

TEST(RobustEstimate, DeterministicAcrossRuns) {
  std::mt19937_64 rng(88);
  auto cs = planted(testutil::random_cloud(rng, 50), testutil::random_transform(rng));
  std::normal_distribution<double> g(0.0, 0.3);
  for (auto& c : cs) c.target += Point3(g(rng), g(rng), g(rng));
  const auto a = robust_estimate(cs), b = robust_estimate(cs);
  EXPECT_EQ(a.transform.R, b.transform.R);
  EXPECT_EQ(a.transform.t, b.transform.t);
  EXPECT_EQ(a.inliers, b.inliers);
}

TEST(RobustEstimate, Errors) {
  const CorrespondenceSet two{{Point3(0, 0, 0), Point3(0, 0, 0), 1}, {Point3(1, 0, 0), Point3(1, 0, 0), 1}};
  testutil::expect_error([&] { robust_estimate(two); }, ErrorCode::kTooFewCorrespondences);
  std::mt19937_64 rng(89);
  const auto a = testutil::random_cloud(rng, 20), b = testutil::random_cloud(rng, 20);
  CorrespondenceSet noise;
  for (std::size_t i = 0; i < a.size(); ++i) noise.push_back({a[i], b[i], 1.0});
  SolveConfig cfg;
  cfg.min_abs_residual = 1e-9;
  cfg.residual_multiplier = 1e-3;
  testutil::expect_error([&] { robust_estimate(noise, cfg); }, ErrorCode::kConvergenceFailed);
  cfg.residual_multiplier = -1.0;
  testutil::expect_error([&] { robust_estimate(noise, cfg); }, ErrorCode::kInvalidParameter);
}

TEST(Icp, IdentityOnIdenticalClouds) {
  const auto c = wavy_surface(20.0, 1.0);
  const auto r = icp_refine(c, c, RigidTransform::identity());
  EXPECT_LT((r.transform.R - Eigen::Matrix3d::Identity()).norm(), 1e-12);
  EXPECT_LT(r.transform.t.norm(), 1e-12);
  EXPECT_LE(r.diagnostics.icp_iterations, 1);
}

TEST(Icp, SmallOffsetConverges) {
  const auto src = wavy_surface(30.0, 0.5);
  const Eigen::Matrix3d R = Eigen::AngleAxisd(0.5 * M_PI / 180.0, Eigen::Vector3d(0.3, -0.2, 1).normalized()).toRotationMatrix();
  const auto gt = RigidTransform::from(R, Eigen::Vector3d(0.06, -0.048, 0.064));
  ASSERT_NEAR(gt.t.norm(), 0.1, 0.001);
  const auto tgt = apply_transform(src, gt);
  const auto r = icp_refine(src, tgt, RigidTransform::identity());
  const auto err = rotation_translation_error(residual_transform(r.transform, gt));
  EXPECT_LT(err.rotation_deg, 0.05);
  EXPECT_LT(err.translation_m, 0.01);
  EXPECT_LE(r.diagnostics.icp_final_mean_residual, r.diagnostics.icp_initial_mean_residual);
}

TEST(Icp, NeverWorseThanInitialGuess) {
  std::mt19937_64 rng(90);
  const auto src = wavy_surface(25.0, 1.0);
  const auto tgt = apply_transform(testutil::random_cloud(rng, 3000, -25, 25), RigidTransform::identity());
  const auto r = icp_refine(src, tgt, RigidTransform::identity());
  EXPECT_LE(r.diagnostics.icp_final_mean_residual, r.diagnostics.icp_initial_mean_residual);
}

TEST(Icp, NoCorrespondencesInRange) {
  const auto c = wavy_surface(10.0, 1.0);
  const auto far = apply_transform(c, RigidTransform::from(Eigen::Matrix3d::Identity(), Eigen::Vector3d(1e4, 0, 0)));
  SolveConfig cfg;
  cfg.icp_max_corr_dist = 5.0;
  testutil::expect_error([&] { icp_refine(c, far, RigidTransform::identity(), cfg); }, ErrorCode::kNoCorrespondencesInRange);
}
