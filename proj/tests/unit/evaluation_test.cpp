#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gensdf/errors.hpp"
#include "gensdf/evaluation.hpp"
#include "gensdf/random.hpp"
#include "test_support.hpp"

namespace gensdf {
namespace {

PointCloud random_cloud(std::size_t n, std::uint64_t seed, double spread = 1.0) {
  Rng rng(seed);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-spread, spread)};
  return PointCloud(std::move(pts));
}

PointCloud transformed(const PointCloud& c, double angle, Point3 shift) {
  const double cs = std::cos(angle), sn = std::sin(angle);
  std::vector<Point3> out;
  for (const Point3& p : c) out.push_back(Point3{cs * p.x - sn * p.y, sn * p.x + cs * p.y, p.z} + shift);
  return PointCloud(std::move(out));
}

TEST(Chamfer, HandComputedExamples) {
  const PointCloud a({{0, 0, 0}}), b({{0, 0, 1}});
  EXPECT_DOUBLE_EQ(chamfer(a, b), 2.0);
  EXPECT_DOUBLE_EQ(chamfer(a, b, ChamferFlavor::unsquared), 2.0);
  // a = {0, 2} on x; b = {1}. a->b: (1 + 1) / 2, b->a: 1. Squared: 1 + 1.
  const PointCloud c({{0, 0, 0}, {2, 0, 0}}), d({{1, 0, 0}});
  EXPECT_DOUBLE_EQ(chamfer(c, d), 2.0);
  const PointCloud e({{0, 0, 0}, {3, 0, 0}});
  // e->d: (1 + 4) / 2 squared, (1 + 2) / 2 unsquared; d->e: 1 both.
  EXPECT_DOUBLE_EQ(chamfer(e, d), 3.5);
  EXPECT_DOUBLE_EQ(chamfer(e, d, ChamferFlavor::unsquared), 2.5);
  EXPECT_EQ(chamfer(c, c), 0.0);
}

TEST(Chamfer, KdTreeMatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PointCloud a = random_cloud(50 + 90 * seed, seed), b = random_cloud(500 - 60 * seed, seed + 100, 0.7);
    for (auto flavor : {ChamferFlavor::squared, ChamferFlavor::unsquared})
      EXPECT_NEAR(chamfer(a, b, flavor), chamfer_brute_force(a, b, flavor), 1e-12);
  }
}

TEST(Chamfer, SymmetricAndRigidInvariant) {
  const PointCloud a = random_cloud(300, 1), b = random_cloud(200, 2, 0.5);
  EXPECT_NEAR(chamfer(a, b), chamfer(b, a), 1e-12);
  const PointCloud ta = transformed(a, 0.7, {0.3, -2.0, 5.0}), tb = transformed(b, 0.7, {0.3, -2.0, 5.0});
  EXPECT_NEAR(chamfer(ta, tb), chamfer(a, b), 1e-10);
}

TEST(Chamfer, FlavorNamesRoundTrip) {
  for (auto f : {ChamferFlavor::squared, ChamferFlavor::unsquared}) EXPECT_EQ(parse_chamfer_flavor(to_string(f)), f);
  EXPECT_THROW(parse_chamfer_flavor("l1"), ConfigError);
  ChamferConfig c;
  c.samples = 0;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(MeshSampling, SingleTriangleSamplesStayInside) {
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  m.triangles = {{0, 1, 2}};
  const PointCloud s = sample_mesh_surface(m, 5000, 4);
  double sx = 0, sy = 0;
  for (const Point3& p : s) {
    EXPECT_EQ(p.z, 0.0);
    EXPECT_GE(p.x, 0.0);
    EXPECT_GE(p.y, 0.0);
    EXPECT_LE(p.x + p.y, 1.0 + 1e-15);
    sx += p.x;
    sy += p.y;
  }
  // Centroid (1/3, 1/3); the standard error of the mean is about 0.0033.
  EXPECT_NEAR(sx / 5000, 1.0 / 3.0, 0.015);
  EXPECT_NEAR(sy / 5000, 1.0 / 3.0, 0.015);
  EXPECT_EQ(sample_mesh_surface(m, 100, 9), sample_mesh_surface(m, 100, 9));
}

TEST(MeshSampling, TrianglesAreChosenByArea) {
  // Areas 0.5 (z = 0) and 1.5 (z = 1): expected share 1:3.
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {3, 0, 1}, {0, 1, 1}};
  m.triangles = {{0, 1, 2}, {3, 4, 5}};
  const std::size_t n = 20000;
  const PointCloud s = sample_mesh_surface(m, n, 11);
  std::size_t top = 0;
  for (const Point3& p : s) top += p.z == 1.0;
  // Binomial(20000, 0.75): sd about 61.
  EXPECT_NEAR(static_cast<double>(top), 0.75 * n, 5 * 61.0);
}

TEST(MeshSampling, DegenerateMeshesAreRejected) {
  TriangleMesh empty;
  EXPECT_THROW(sample_mesh_surface(empty, 10, 0), EvaluationError);
  TriangleMesh flat;
  flat.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  flat.triangles = {{0, 1, 2}};
  EXPECT_THROW(sample_mesh_surface(flat, 10, 0), EvaluationError);
  EXPECT_THROW(sample_mesh_surface(flat, 0, 0), ArgumentError);
}

TEST(MeshCd, EmptyMeshIsInfiniteAndFlagged) {
  const CdResult r = mesh_cd(TriangleMesh{}, make_sphere(0.5), ChamferConfig{});
  EXPECT_TRUE(r.empty_mesh);
  EXPECT_TRUE(std::isinf(r.cd));
}

TEST(MeshCd, FineSphereMeshIsCloseToTruthAndCoarseIsWorse) {
  const ShapeInstance s = make_sphere(0.5);
  ChamferConfig cfg;
  cfg.samples = 5000;
  auto cd_at = [&](std::size_t res) {
    return mesh_cd(marching_cubes(evaluate_field([&](const Point3& p) { return exact_sdf(s, p); }, res)), s, cfg).cd;
  };
  const double fine = cd_at(64), coarse = cd_at(12);
  EXPECT_LT(fine, 1e-3);
  EXPECT_GT(coarse, fine);
}

TEST(SignAccuracy, ExactFieldScoresOneAndNegatedScoresZero) {
  const ShapeInstance torus = make_torus(0.5, 0.15);
  const PointCloud cloud = sample_surface(torus, 512, 1);
  SignAccuracyOptions o;
  o.queries = 2000;
  EXPECT_EQ(sign_accuracy([&](const Point3& x) { return exact_sdf(torus, x); }, torus, cloud, o), 1.0);
  EXPECT_EQ(sign_accuracy([&](const Point3& x) { return -exact_sdf(torus, x); }, torus, cloud, o), 0.0);
}

TEST(SignAccuracy, ConstantPredictorScoresOutsideFraction) {
  const ShapeInstance box = make_box({0.4, 0.3, 0.2});
  const PointCloud cloud = sample_surface(box, 512, 2);
  SignAccuracyOptions o;
  o.queries = 1000;
  o.seed = 5;
  // Oracle: the same query draw, counted directly.
  QuerySamplingOptions q;
  q.n_near = 500;
  q.n_uniform = 500;
  q.sigma_near = o.sigma_near;
  std::size_t kept = 0, outside = 0;
  for (const auto& s : sample_queries(box, cloud, q, o.seed, true)) {
    if (std::abs(*s.gt_sdf) < o.band) continue;
    ++kept;
    outside += *s.gt_sdf >= 0.0;
  }
  EXPECT_DOUBLE_EQ(sign_accuracy([](const Point3&) { return 1.0; }, box, cloud, o),
                   static_cast<double>(outside) / static_cast<double>(kept));
}

TEST(Noise, ZeroVarianceIsIdentityAndNoiseHasTheRequestedSpread) {
  const PointCloud c = random_cloud(4000, 3);
  EXPECT_EQ(add_gaussian_noise(c, 0.0, 1), c);
  const PointCloud n = add_gaussian_noise(c, 0.04, 1);
  double s2 = 0;
  for (std::size_t i = 0; i < c.size(); ++i) s2 += squared_distance(c[i], n[i]);
  // Per-coordinate variance 0.04; sampling error about 1.5%.
  EXPECT_NEAR(s2 / (3.0 * c.size()), 0.04, 0.04 * 0.08);
  EXPECT_EQ(add_gaussian_noise(c, 0.04, 1), n);
  EXPECT_THROW(add_gaussian_noise(c, -1.0, 1), ArgumentError);
}

TEST(Noise, ConfigValidation) {
  NoiseConfig c;
  EXPECT_NO_THROW(validate(c));
  c.variances = {};
  EXPECT_THROW(validate(c), ConfigError);
  c.variances = {0.0, 0.1, 0.05};
  EXPECT_THROW(validate(c), ConfigError);
  c.variances = {-0.1};
  EXPECT_THROW(validate(c), ConfigError);
  NoiseConfig d;
  d.variances = {0.0, 0.3};
  d.seed = 8;
  const NoiseConfig back = nlohmann::json(d).get<NoiseConfig>();
  EXPECT_EQ(back.variances, d.variances);
  EXPECT_EQ(back.seed, 8u);
}

TEST(Statistics, MedianAndMean) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_EQ(mean({1.0, 2.0, 6.0}), 3.0);
  EXPECT_THROW(median({}), EvaluationError);
  EXPECT_THROW(mean({}), EvaluationError);
}

TEST(Report, SummaryTakesMedianOverSeedMeans) {
  ExperimentReport r;
  auto add = [&](std::uint64_t seed, double cd) {
    r.records.push_back({"proposed", "torus", "t" + std::to_string(r.records.size()), seed, false, cd, false, 0.9});
  };
  add(0, 1.0);
  add(0, 3.0);  // seed 0 mean 2
  add(1, 10.0);
  add(1, 20.0);  // seed 1 mean 15
  add(2, 4.0);
  add(2, 4.0);  // seed 2 mean 4
  r.summarize();
  const CategorySummary* s = r.find("proposed", "torus");
  ASSERT_NE(s, nullptr);
  EXPECT_EQ(s->count, 6u);
  EXPECT_DOUBLE_EQ(s->seed_median_cd, 4.0);
  EXPECT_DOUBLE_EQ(s->median_cd, 4.0);
  EXPECT_DOUBLE_EQ(s->mean_cd, 42.0 / 6.0);
  EXPECT_EQ(r.find("proposed", "sphere"), nullptr);
}

TEST(Report, InfiniteCdIsWrittenAsNullInJson) {
  testing::TempDir dir;
  ExperimentReport r;
  r.records.push_back({"sup-only", "box", "b0", 0, true, std::numeric_limits<double>::infinity(), true, 0.5});
  r.summarize();
  write_report_json(r, dir / "r.json");
  write_report_csv(r, dir / "r.csv");
  std::ifstream in(dir / "r.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_TRUE(j["records"][0]["cd"].is_null());
  EXPECT_TRUE(j["records"][0]["empty_mesh"].get<bool>());
  EXPECT_TRUE(j["categories"][0]["mean_cd"].is_null());
  std::ifstream csv(dir / "r.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "arm,category,shape_id,seed,seen,cd,empty_mesh,sign_acc");
}

TEST(Ablation, ArmNamesAndConfigRoundTrip) {
  for (Arm a : {Arm::proposed, Arm::only_meta, Arm::only_semi, Arm::sup_only, Arm::gradient_pull})
    EXPECT_EQ(parse_arm(to_string(a)), a);
  EXPECT_THROW(parse_arm("everything"), ConfigError);
  AblationConfig c;
  c.arms = {Arm::sup_only, Arm::gradient_pull};
  c.seeds = {4, 5};
  c.reconstruction.resolution = 40;
  const AblationConfig back = nlohmann::json(c).get<AblationConfig>();
  EXPECT_EQ(back.arms, c.arms);
  EXPECT_EQ(back.seeds, c.seeds);
  EXPECT_EQ(back.reconstruction.resolution, 40u);
  nlohmann::json bad = c;
  bad["arms"] = nlohmann::json::array();
  EXPECT_THROW(bad.get<AblationConfig>(), ConfigError);
}

}  // namespace
}  // namespace gensdf
