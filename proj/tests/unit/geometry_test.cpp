#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "gensdf/errors.hpp"
#include "gensdf/geometry.hpp"
#include "gensdf/kdtree.hpp"
#include "gensdf/random.hpp"

namespace gensdf {
namespace {

constexpr double kPi = std::numbers::pi;

ShapeInstance any_shape(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::sphere: return make_sphere(0.5);
    case ShapeFamily::box: return make_box({0.3, 0.4, 0.5});
    case ShapeFamily::torus: return make_torus(0.5, 0.15);
    case ShapeFamily::capsule: return make_capsule(0.3, 0.25);
    case ShapeFamily::cylinder: return make_cylinder(0.35, 0.4);
    case ShapeFamily::composite_union:
      return make_union({make_box({0.3, 0.3, 0.3}, {{-0.2, 0, 0}, 1.0}), make_sphere(0.3, {{0.3, 0, 0}, 1.0})});
  }
  return make_sphere(0.5);
}

const ShapeFamily kFamilies[] = {ShapeFamily::sphere,  ShapeFamily::box,      ShapeFamily::torus,
                                 ShapeFamily::capsule, ShapeFamily::cylinder, ShapeFamily::composite_union};

TEST(ShapeSdf, SphereMatchesClosedForm) {
  const ShapeInstance s = make_sphere(0.5);
  EXPECT_DOUBLE_EQ(exact_sdf(s, {0, 0, 0}), -0.5);
  EXPECT_DOUBLE_EQ(exact_sdf(s, {1, 0, 0}), 0.5);
  EXPECT_NEAR(exact_sdf(s, {0.3, 0.4, 0}), 0.0, 1e-15);
}

TEST(ShapeSdf, BoxValuesAtHandPickedPoints) {
  const ShapeInstance b = make_box({0.3, 0.4, 0.5});
  EXPECT_DOUBLE_EQ(exact_sdf(b, {0, 0, 0}), -0.3);
  EXPECT_DOUBLE_EQ(exact_sdf(b, {0.8, 0, 0}), 0.5);
  // Outside a corner: Euclidean distance to the corner.
  EXPECT_NEAR(exact_sdf(b, {0.6, 0.8, 0.5}), std::hypot(0.3, 0.4), 1e-15);
}

TEST(ShapeSdf, TorusCapsuleCylinderClosedForms) {
  const ShapeInstance t = make_torus(0.5, 0.15);
  EXPECT_NEAR(exact_sdf(t, {0.5, 0, 0}), -0.15, 1e-15);
  EXPECT_NEAR(exact_sdf(t, {0, 0, 0}), 0.35, 1e-15);
  EXPECT_NEAR(exact_sdf(t, {0, 0.4, 0.5}), 0.25, 1e-15);

  const ShapeInstance c = make_capsule(0.3, 0.25);
  EXPECT_NEAR(exact_sdf(c, {0, 0.9, 0}), 0.35, 1e-15);
  EXPECT_NEAR(exact_sdf(c, {0.5, 0.1, 0}), 0.25, 1e-15);

  const ShapeInstance y = make_cylinder(0.35, 0.4);
  EXPECT_NEAR(exact_sdf(y, {0, 0.6, 0}), 0.2, 1e-15);
  EXPECT_NEAR(exact_sdf(y, {0.55, 0.6, 0}), std::hypot(0.2, 0.2), 1e-15);
  EXPECT_NEAR(exact_sdf(y, {0, 0, 0}), -0.35, 1e-15);
}

TEST(ShapeSdf, PoseScalesDistances) {
  const ShapeInstance s = make_sphere(0.4, {{0.1, -0.2, 0.05}, 1.5});
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Point3 x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    EXPECT_NEAR(exact_sdf(s, x), distance(x, {0.1, -0.2, 0.05}) - 0.6, 1e-12);
  }
}

TEST(ShapeSdf, SurfaceSamplesLieOnTheZeroSet) {
  for (ShapeFamily f : kFamilies) {
    const ShapeInstance s = any_shape(f);
    const PointCloud cloud = sample_surface(s, 2000, 7);
    for (const Point3& p : cloud) ASSERT_NEAR(exact_sdf(s, p), 0.0, 1e-12) << to_string(f);
  }
}

TEST(ShapeSdf, SampleSurfaceIsSeedDeterministic) {
  const ShapeInstance s = any_shape(ShapeFamily::torus);
  EXPECT_EQ(sample_surface(s, 500, 11), sample_surface(s, 500, 11));
  EXPECT_NE(sample_surface(s, 500, 11), sample_surface(s, 500, 12));
}

// Distance fields have unit gradient almost everywhere.
TEST(ShapeSdf, EikonalAwayFromMedialSets) {
  for (ShapeFamily f : {ShapeFamily::sphere, ShapeFamily::torus, ShapeFamily::capsule}) {
    const ShapeInstance s = any_shape(f);
    Rng rng(5);
    int checked = 0;
    for (int i = 0; i < 400; ++i) {
      const Point3 x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      const double h = 1e-6;
      const Point3 g{(exact_sdf(s, x + Point3{h, 0, 0}) - exact_sdf(s, x - Point3{h, 0, 0})) / (2 * h),
                     (exact_sdf(s, x + Point3{0, h, 0}) - exact_sdf(s, x - Point3{0, h, 0})) / (2 * h),
                     (exact_sdf(s, x + Point3{0, 0, h}) - exact_sdf(s, x - Point3{0, 0, h})) / (2 * h)};
      if (std::abs(exact_sdf(s, x)) < 1e-3) continue;
      if (std::abs(norm(g) - 1.0) > 1e-4) continue;  // medial set hit
      ++checked;
    }
    EXPECT_GT(checked, 380) << to_string(f);
  }
}

TEST(ShapeArea, ClosedForms) {
  EXPECT_NEAR(surface_area(make_sphere(0.5)), 4 * kPi * 0.25, 1e-12);
  EXPECT_NEAR(surface_area(make_box({0.3, 0.4, 0.5})), 8 * (0.3 * 0.4 + 0.4 * 0.5 + 0.3 * 0.5), 1e-12);
  EXPECT_NEAR(surface_area(make_torus(0.5, 0.15)), 4 * kPi * kPi * 0.5 * 0.15, 1e-12);
  EXPECT_NEAR(surface_area(make_capsule(0.3, 0.25)), 4 * kPi * 0.0625 + 2 * kPi * 0.25 * 0.6, 1e-12);
  EXPECT_NEAR(surface_area(make_cylinder(0.35, 0.4)), 2 * kPi * 0.35 * 0.35 + 2 * kPi * 0.35 * 0.8, 1e-12);
  EXPECT_NEAR(surface_area(make_sphere(0.2, {{0, 0, 0}, 2.0})), 4 * kPi * 0.16, 1e-12);
}

// Area-uniform sampling: the fraction of box samples on the x faces matches
// their share of the area.
TEST(ShapeSampling, BoxFacesReceiveAreaProportionalShare) {
  const ShapeInstance b = make_box({0.2, 0.4, 0.6});
  const std::size_t n = 40000;
  const PointCloud cloud = sample_surface(b, n, 21);
  std::size_t on_x = 0;
  for (const Point3& p : cloud) on_x += std::abs(std::abs(p.x) - 0.2) < 1e-12;
  const double expected = 2 * 0.4 * 0.6 * 4 / surface_area(b);
  const double sd = std::sqrt(expected * (1 - expected) / n);
  EXPECT_NEAR(static_cast<double>(on_x) / n, expected, 4 * sd);
}

TEST(ShapeValidation, RejectsBadParameters) {
  EXPECT_THROW(validate(make_sphere(-0.1)), ShapeError);
  EXPECT_THROW(validate(make_sphere(1.5)), ShapeError);
  EXPECT_THROW(validate(make_torus(0.2, 0.3)), ShapeError);
  EXPECT_THROW(validate(make_sphere(0.3, {{0, 0, 0}, 0.0})), ShapeError);
  ShapeInstance wrong = make_box({0.1, 0.1, 0.1});
  wrong.parameters.pop_back();
  EXPECT_THROW(validate(wrong), ConfigError);
  EXPECT_THROW(parse_shape_family("teapot"), ConfigError);
  EXPECT_NO_THROW(validate(any_shape(ShapeFamily::composite_union)));
}

TEST(PointCloudType, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(PointCloud(std::vector<Point3>{}), ArgumentError);
  EXPECT_THROW(PointCloud(std::vector<Point3>{{0, std::nan(""), 0}}), ArgumentError);
}

TEST(QuerySampling, CountsLabelsAndNearestNeighbors) {
  const ShapeInstance s = make_sphere(0.5);
  const PointCloud cloud = sample_surface(s, 300, 1);
  const KdTree tree(cloud);
  QuerySamplingOptions o{40, 10, 0.05};
  const auto labeled = sample_queries(s, tree, o, 9, true);
  ASSERT_EQ(labeled.size(), 50u);
  for (const auto& q : labeled) {
    ASSERT_TRUE(q.gt_sdf.has_value());
    EXPECT_DOUBLE_EQ(*q.gt_sdf, exact_sdf(s, q.x));
    const Neighbor nb = nearest_linear_scan(cloud.points(), q.x);
    EXPECT_EQ(q.nn_index, nb.index);
    EXPECT_EQ(q.nn, nb.point);
  }
  for (std::size_t i = 40; i < 50; ++i) {
    EXPECT_LE(std::abs(labeled[i].x.x), 1.0);
    EXPECT_LE(std::abs(labeled[i].x.y), 1.0);
  }
  const auto unlabeled = sample_queries(s, tree, o, 9, false);
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    EXPECT_FALSE(unlabeled[i].gt_sdf.has_value());
    EXPECT_EQ(unlabeled[i].x, labeled[i].x);
  }
  const UnlabeledQueryBatch raw = sample_unlabeled_queries(tree, o, 9);
  ASSERT_EQ(raw.size(), 50u);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(raw.x[i], labeled[i].x);
}

TEST(QuerySampling, GroundTruthSignsNeedLabels) {
  const ShapeInstance s = make_sphere(0.5);
  const PointCloud cloud = sample_surface(s, 100, 1);
  const auto unlabeled = sample_queries(s, cloud, {5, 5, 0.05}, 2, false);
  EXPECT_THROW(ground_truth_signs(unlabeled), DatasetError);
  const auto labeled = sample_queries(s, cloud, {5, 5, 0.05}, 2, true);
  const auto signs = ground_truth_signs(labeled);
  for (std::size_t i = 0; i < labeled.size(); ++i) EXPECT_EQ(signs[i], *labeled[i].gt_sdf >= 0 ? 1 : -1);
}

TEST(Normalization, RoundTripsAndFitsTarget) {
  const PointCloud cloud = sample_surface(make_box({0.2, 0.3, 0.1}, {{0.1, 0.1, -0.1}, 1.0}), 500, 3);
  const NormalizationTransform t = fit_normalization(cloud, 0.8);
  const PointCloud n = apply_normalization(cloud, t);
  double max_abs = 0;
  for (const Point3& p : n) max_abs = std::max({max_abs, std::abs(p.x), std::abs(p.y), std::abs(p.z)});
  EXPECT_NEAR(max_abs, 0.8, 1e-12);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point3 back = t.invert(n[i]);
    EXPECT_NEAR(distance(back, cloud[i]), 0.0, 1e-12);
  }
}

}  // namespace
}  // namespace gensdf
