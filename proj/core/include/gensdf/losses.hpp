#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/autodiff.hpp"
#include "gensdf/geometry.hpp"
#include "gensdf/model.hpp"

namespace gensdf {

struct LossWeights {
  double lambda_m = 0.1;
  double lambda_s = 0.1;
  double lambda_p = 0.01;
};

void validate(const LossWeights& weights);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// Which sign selects the branch of the signed nearest-neighbor estimate.
enum class SignSource { predicted, ground_truth };
// How the surface point t-hat is estimated from a query.
enum class SelfEstimator { signed_nn, gradient_pull };

std::string_view to_string(SignSource s);
std::string_view to_string(SelfEstimator e);
SelfEstimator parse_self_estimator(std::string_view name);

// total = sup_term + lambda * (self_term + lambda_p * point_term), where
// lambda is the stage weight in effect (1 when the breakdown is a bare
// self-supervised loss, 0 for a bare supervised loss).
struct LossBreakdown {
  double total = 0.0;
  double sup_term = 0.0;
  double self_term = 0.0;
  double point_term = 0.0;
  double lambda = 0.0;
  double lambda_p = 0.0;
  std::size_t sup_count = 0;
  std::size_t self_count = 0;    // non-skipped self-supervised samples
  std::size_t self_skipped = 0;  // samples dropped because the direction was undefined
  std::size_t point_count = 0;
};

// Mean absolute error.
double loss_sup(std::span<const double> preds, std::span<const double> gts);

// Signed nearest-neighbor estimate of the surface point:
// d = (x - t)/|x - t|; branch sign >= 0 gives x - d*phi, otherwise x + d*phi.
// The branch sign is sign(phi) for SignSource::predicted and gt_sign for
// SignSource::ground_truth. Returns nullopt when |x - t| < 1e-9.
std::optional<Point3> t_hat_signed(const Point3& x, const Point3& t, double phi, SignSource source,
                                   std::optional<double> gt_sign = std::nullopt);

// Gradient-pull estimate x - normalize(grad) * phi; nullopt when
// |grad| < 1e-9.
std::optional<Point3> t_hat_gradient(const Point3& x, double phi, const Point3& grad);

// Queries for the self-supervised term. gt_sign is only filled (and only
// read) for SignSource::ground_truth.
struct SelfBatch {
  std::vector<Point3> x;
  std::vector<Point3> nn;
  std::vector<double> gt_sign;

  std::size_t size() const { return x.size(); }
  static SelfBatch unlabeled(const UnlabeledQueryBatch& batch);
  // Pseudo-unlabeled: distances come from nearest neighbors only, signs from
  // the labels.
  static SelfBatch with_signs(std::span<const QuerySample> samples);
};

struct SelfLossOptions {
  SignSource sign_source = SignSource::predicted;
  SelfEstimator estimator = SelfEstimator::signed_nn;
  std::size_t point_subsample = 2048;  // 0 uses the whole cloud
  std::uint64_t seed = 0;              // point-term subsample
};

// Indices of the point-term subsample: all points when n <= count, else a
// seeded draw without replacement (sorted).
std::vector<std::size_t> point_subsample(std::size_t n, std::size_t count, std::uint64_t seed);

// --- graph-level terms used by training -------------------------------------

ad::Var sup_loss_var(ad::Graph& g, const ConditionalSdfModel& model, const ModelVars& vars, const EncodedVars& enc,
                     std::span<const QuerySample> samples);

struct SelfLossVars {
  ad::Var self_term;   // mean |t_hat - t|^2 over non-skipped samples
  ad::Var point_term;  // mean |phi(p)| over the cloud subsample
  std::size_t self_count = 0;
  std::size_t self_skipped = 0;
  std::size_t point_count = 0;
};

// Throws LossError if every sample is skipped.
SelfLossVars self_loss_vars(ad::Graph& g, const ConditionalSdfModel& model, const ModelVars& vars,
                            const EncodedVars& enc, const SelfBatch& batch, const PointCloud& cloud,
                            const SelfLossOptions& options);

// --- value-level losses ------------------------------------------------------

LossBreakdown sup_breakdown(double sup_term, std::size_t count);
LossBreakdown self_breakdown(double self_term, double point_term, const LossWeights& weights,
                             std::size_t self_count = 0, std::size_t self_skipped = 0, std::size_t point_count = 0);

LossBreakdown loss_self(const ConditionalSdfModel& model, const LatentFeatures& features, const SelfBatch& batch,
                        const PointCloud& cloud, const LossWeights& weights, const SelfLossOptions& options);

// total = sup + lambda * (self + lambda_p * point)
LossBreakdown combine(const LossBreakdown& sup_part, const LossBreakdown& self_part, double lambda,
                      double lambda_p);
LossBreakdown loss_meta(const LossBreakdown& sup_part, const LossBreakdown& self_part, const LossWeights& weights);
LossBreakdown loss_semi(const LossBreakdown& sup_part, const LossBreakdown& self_part, const LossWeights& weights);

}  // namespace gensdf
