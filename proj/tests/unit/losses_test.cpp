#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "gensdf/errors.hpp"
#include "gensdf/kdtree.hpp"
#include "gensdf/losses.hpp"
#include "gensdf/random.hpp"

namespace gensdf {
namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.encoder.variant = EncoderVariant::global_latent;
  c.encoder.widths = {8};
  c.encoder.latent_dim = 8;
  c.decoder.hidden = {16, 16};
  c.init_seed = 5;
  return c;
}

TEST(SupervisedLoss, IdenticalInputsGiveExactlyZero) {
  Rng rng(1);
  std::vector<double> a(257);
  for (double& v : a) v = rng.uniform(-1, 1);
  EXPECT_EQ(loss_sup(a, a), 0.0);
}

TEST(SupervisedLoss, MeanAbsoluteErrorAndErrors) {
  const std::vector<double> p{1.0, -2.0, 0.5}, g{0.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(loss_sup(p, g), 3.5 / 3.0);
  EXPECT_THROW(loss_sup(p, std::vector<double>{1.0}), LossError);
  EXPECT_THROW(loss_sup(std::vector<double>{}, std::vector<double>{}), LossError);
}

// With phi equal to the true signed distance and the matching branch sign,
// the estimate lands on the nearest surface point.
TEST(SignedEstimate, RecoversNearestSurfacePoint) {
  const ShapeInstance sphere = make_sphere(0.5);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const Point3 x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Point3 t = x * (0.5 / norm(x));
    const double phi = exact_sdf(sphere, x);
    const double sign = phi >= 0 ? 1.0 : -1.0;
    const auto a = t_hat_signed(x, t, phi, SignSource::predicted);
    const auto b = t_hat_signed(x, t, phi, SignSource::ground_truth, sign);
    ASSERT_TRUE(a && b);
    EXPECT_NEAR(distance(*a, t), 0.0, 1e-12);
    EXPECT_NEAR(distance(*b, t), 0.0, 1e-12);
  }
}

// A prediction with the wrong sign is pushed away from t by exactly |phi|.
TEST(SignedEstimate, WrongSignPenaltyIdentity) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Point3 x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Point3 t{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double gt_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double phi = -gt_sign * rng.uniform(0.01, 0.8);
    const auto th = t_hat_signed(x, t, phi, SignSource::ground_truth, gt_sign);
    ASSERT_TRUE(th);
    EXPECT_NEAR(distance(*th, t), distance(x, t) + std::abs(phi), 1e-12);
  }
}

TEST(SignedEstimate, DegenerateDirectionIsSkipped) {
  EXPECT_FALSE(t_hat_signed({0.1, 0.1, 0.1}, {0.1, 0.1, 0.1}, 0.2, SignSource::predicted));
  EXPECT_FALSE(t_hat_gradient({0, 0, 0}, 0.3, {0, 0, 0}));
  const auto g = t_hat_gradient({1, 0, 0}, 0.25, {2, 0, 0});
  ASSERT_TRUE(g);
  EXPECT_DOUBLE_EQ(g->x, 0.75);
}

TEST(SelfLoss, GraphTermMatchesPointwiseEstimates) {
  const ConditionalSdfModel model(tiny_model());
  const ShapeInstance shape = make_capsule(0.2, 0.3);
  const PointCloud cloud = sample_surface(shape, 300, 1);
  const KdTree tree(cloud);
  const auto samples = sample_queries(shape, tree, {48, 16, 0.05}, 4, true);
  const LatentFeatures f = model.encode(cloud);

  for (SignSource source : {SignSource::predicted, SignSource::ground_truth}) {
    const SelfBatch batch = source == SignSource::predicted ? SelfBatch::unlabeled(strip_labels(samples))
                                                            : SelfBatch::with_signs(samples);
    SelfLossOptions o;
    o.sign_source = source;
    o.point_subsample = 0;
    const LossBreakdown b = loss_self(model, f, batch, cloud, LossWeights{}, o);

    double sum = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double phi = model.predict(batch.x[i], f);
      const auto th = source == SignSource::predicted
                          ? t_hat_signed(batch.x[i], batch.nn[i], phi, source)
                          : t_hat_signed(batch.x[i], batch.nn[i], phi, source, batch.gt_sign[i]);
      if (!th) continue;
      sum += squared_distance(*th, batch.nn[i]);
      ++kept;
    }
    double point = 0.0;
    for (const Point3& p : cloud) point += std::abs(model.predict(p, f));
    point /= static_cast<double>(cloud.size());

    EXPECT_NEAR(b.self_term, sum / static_cast<double>(kept), 1e-12);
    EXPECT_NEAR(b.point_term, point, 1e-12);
    EXPECT_EQ(b.self_count, kept);
    EXPECT_NEAR(b.total, b.self_term + 0.01 * b.point_term, 1e-15);
  }
}

TEST(SelfLoss, AllSkippedIsLossError) {
  const ConditionalSdfModel model(tiny_model());
  const PointCloud cloud({{0.1, 0.2, 0.3}});
  SelfBatch batch;
  batch.x = {{0.1, 0.2, 0.3}};
  batch.nn = {{0.1, 0.2, 0.3}};
  EXPECT_THROW(loss_self(model, model.encode(cloud), batch, cloud, LossWeights{}, SelfLossOptions{}), LossError);
}

TEST(SelfLoss, GradientsPassFiniteDifferences) {
  const ConditionalSdfModel model(tiny_model());
  const ShapeInstance shape = make_sphere(0.45);
  const PointCloud cloud = sample_surface(shape, 60, 2);
  const KdTree tree(cloud);
  const auto samples = sample_queries(shape, tree, {12, 4, 0.05}, 7, true);
  for (SignSource source : {SignSource::predicted, SignSource::ground_truth}) {
    const SelfBatch batch = source == SignSource::predicted ? SelfBatch::unlabeled(strip_labels(samples))
                                                            : SelfBatch::with_signs(samples);
    SelfLossOptions o;
    o.sign_source = source;
    o.point_subsample = 20;
    auto f = [&](ad::Graph& g, std::span<const ad::Var> v) {
      ModelVars vars;
      vars.params.assign(v.begin(), v.end());
      const EncodedVars enc = model.encode(g, vars, cloud);
      const SelfLossVars t = self_loss_vars(g, model, vars, enc, batch, cloud, o);
      return ad::add(t.self_term, ad::scalar_mul(t.point_term, 0.01));
    };
    ad::GradCheckOptions go;
    go.max_coordinates = 150;
    const auto res = ad::grad_check(f, model.parameters(), go);
    EXPECT_LE(res.max_relative_error, 1e-4) << to_string(source);
    EXPECT_GT(res.checked, 100u);
  }
}

TEST(LossCombination, StageWeightsApply) {
  const LossBreakdown sup = sup_breakdown(0.4, 10);
  const LossBreakdown self = self_breakdown(0.2, 0.5, LossWeights{0.3, 0.7, 0.01});
  const LossWeights w{0.3, 0.7, 0.01};
  EXPECT_DOUBLE_EQ(loss_meta(sup, self, w).total, 0.4 + 0.3 * (0.2 + 0.01 * 0.5));
  EXPECT_DOUBLE_EQ(loss_semi(sup, self, w).total, 0.4 + 0.7 * (0.2 + 0.01 * 0.5));
  EXPECT_DOUBLE_EQ(loss_meta(sup, self, LossWeights{0.0, 0.0, 0.01}).total, 0.4);
  EXPECT_THROW(validate(LossWeights{-0.1, 0.1, 0.01}), ConfigError);
}

TEST(PointSubsample, SortedUniqueDeterministic) {
  const auto a = point_subsample(1000, 100, 9);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 100u);
  EXPECT_EQ(a, point_subsample(1000, 100, 9));
  EXPECT_NE(a, point_subsample(1000, 100, 10));
  EXPECT_EQ(point_subsample(50, 100, 1).size(), 50u);
  EXPECT_EQ(point_subsample(50, 0, 1).size(), 50u);
}

}  // namespace
}  // namespace gensdf
