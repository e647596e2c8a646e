#include "gensdf/losses.hpp"

#include <algorithm>
#include <cmath>

#include "gensdf/errors.hpp"
#include "gensdf/random.hpp"

namespace gensdf {

namespace {

constexpr double kMinDirectionNorm = 1e-9;

}  // namespace

void validate(const LossWeights& w) {
  for (double v : {w.lambda_m, w.lambda_s, w.lambda_p})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and nonnegative");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_m", w.lambda_m}, {"lambda_s", w.lambda_s}, {"lambda_p", w.lambda_p}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  try {
    w = LossWeights{};
    w.lambda_m = j.value("lambda_m", w.lambda_m);
    w.lambda_s = j.value("lambda_s", w.lambda_s);
    w.lambda_p = j.value("lambda_p", w.lambda_p);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed loss weights: ") + e.what());
  }
  validate(w);
}

std::string_view to_string(SignSource s) { return s == SignSource::predicted ? "predicted" : "ground-truth"; }

std::string_view to_string(SelfEstimator e) {
  return e == SelfEstimator::signed_nn ? "signed-nn" : "gradient-pull";
}

SelfEstimator parse_self_estimator(std::string_view name) {
  if (name == "signed-nn") return SelfEstimator::signed_nn;
  if (name == "gradient-pull") return SelfEstimator::gradient_pull;
  throw ConfigError("unknown self-supervised estimator '" + std::string(name) + "'");
}

double loss_sup(std::span<const double> preds, std::span<const double> gts) {
  if (preds.size() != gts.size())
    throw LossError("loss_sup: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(gts.size()) +
                    " targets");
  if (preds.empty()) throw LossError("loss_sup: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - gts[i]);
  return s / static_cast<double>(preds.size());
}

std::optional<Point3> t_hat_signed(const Point3& x, const Point3& t, double phi, SignSource source,
                                   std::optional<double> gt_sign) {
  if (source == SignSource::ground_truth && !gt_sign)
    throw ArgumentError("t_hat_signed: ground-truth sign source needs a sign");
  const double len = distance(x, t);
  if (len < kMinDirectionNorm) return std::nullopt;
  const Point3 d = (x - t) / len;
  const double sigma = source == SignSource::predicted ? phi : *gt_sign;
  return sigma >= 0.0 ? x - d * phi : x + d * phi;
}

std::optional<Point3> t_hat_gradient(const Point3& x, double phi, const Point3& grad) {
  if (!is_finite(grad)) throw ArgumentError("t_hat_gradient: gradient must be finite");
  const double len = norm(grad);
  if (len < kMinDirectionNorm) return std::nullopt;
  return x - (grad / len) * phi;
}

SelfBatch SelfBatch::unlabeled(const UnlabeledQueryBatch& batch) {
  SelfBatch b;
  b.x = batch.x;
  b.nn = batch.nn;
  return b;
}

SelfBatch SelfBatch::with_signs(std::span<const QuerySample> samples) {
  SelfBatch b;
  const std::vector<int> signs = ground_truth_signs(samples);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    b.x.push_back(samples[i].x);
    b.nn.push_back(samples[i].nn);
    b.gt_sign.push_back(static_cast<double>(signs[i]));
  }
  return b;
}

std::vector<std::size_t> point_subsample(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (count == 0 || n <= count) return idx;
  Rng rng(derive_seed(seed, {0x504F494E54}));
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

ad::Var sup_loss_var(ad::Graph& g, const ConditionalSdfModel& model, const ModelVars& vars, const EncodedVars& enc,
                     std::span<const QuerySample> samples) {
  if (samples.empty()) throw LossError("supervised batch is empty");
  std::vector<Point3> xs;
  ad::Tensor gts({samples.size(), 1});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].gt_sdf) throw DatasetError("supervised sample without a ground-truth label");
    xs.push_back(samples[i].x);
    gts[i] = *samples[i].gt_sdf;
  }
  const ad::Var phi = model.predict(g, vars, enc, g.constant(points_to_tensor(xs)));
  return ad::reduce_mean(ad::abs(ad::sub(phi, g.constant(std::move(gts)))));
}

namespace {

LatentFeatures detach(const ConditionalSdfModel& model, const EncodedVars& enc) {
  LatentFeatures f;
  f.variant = model.config().encoder.variant;
  f.global = enc.global.value();
  if (enc.grid.valid()) f.grid = enc.grid.value();
  f.grid_spec = ad::GridSpec{model.config().encoder.grid_resolution, -1.0, 1.0};
  return f;
}

// Gradient-pull directions need the current model as a plain function.
ConditionalSdfModel detached_model(const ConditionalSdfModel& model, const ModelVars& vars) {
  ConditionalSdfModel copy(model.config());
  for (std::size_t i = 0; i < vars.params.size(); ++i) copy.parameters()[i] = vars.params[i].value();
  return copy;
}

}  // namespace

SelfLossVars self_loss_vars(ad::Graph& g, const ConditionalSdfModel& model, const ModelVars& vars,
                            const EncodedVars& enc, const SelfBatch& batch, const PointCloud& cloud,
                            const SelfLossOptions& options) {
  if (batch.nn.size() != batch.size()) throw ArgumentError("self-supervised batch: x and nn lengths differ");
  const bool use_gt = options.sign_source == SignSource::ground_truth;
  if (use_gt && batch.gt_sign.size() != batch.size())
    throw ArgumentError("ground-truth sign source requires a sign for every sample");

  // Per kept sample: direction d and the constant offset x - t.
  std::vector<std::size_t> kept;
  std::vector<Point3> dirs;
  if (options.estimator == SelfEstimator::signed_nn) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double len = distance(batch.x[i], batch.nn[i]);
      if (len < kMinDirectionNorm) continue;
      kept.push_back(i);
      dirs.push_back((batch.x[i] - batch.nn[i]) / len);
    }
  } else {
    // First-order estimator: the direction is treated as a constant.
    const ConditionalSdfModel frozen = detached_model(model, vars);
    const std::vector<Point3> grads = frozen.input_gradients(batch.x, detach(model, enc));
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double len = norm(grads[i]);
      if (len < kMinDirectionNorm) continue;
      kept.push_back(i);
      dirs.push_back(grads[i] / len);
    }
  }
  if (kept.empty()) throw LossError("every self-supervised sample was skipped (undefined direction)");

  const std::size_t k = kept.size();
  std::vector<Point3> xs;
  ad::Tensor offset({k, 3}), dir({k, 3});
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t i = kept[r];
    xs.push_back(batch.x[i]);
    const Point3 xt = batch.x[i] - batch.nn[i];
    for (int a = 0; a < 3; ++a) {
      offset[3 * r + a] = xt[a];
      dir[3 * r + a] = dirs[r][a];
    }
  }
  const ad::Var phi = model.predict(g, vars, enc, g.constant(points_to_tensor(xs)));

  // Branch coefficient c: t_hat = x - d * (c * phi). The gradient-pull
  // estimate has no branch.
  ad::Tensor coef({k, 1}, 1.0);
  if (options.estimator == SelfEstimator::signed_nn) {
    std::uint64_t h = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const double sigma = use_gt ? batch.gt_sign[kept[r]] : phi.value()[r];
      if (!use_gt && sigma == 0.0) g.note_kink();
      coef[r] = sigma >= 0.0 ? 1.0 : -1.0;
      if (g.tracking() && coef[r] < 0.0) h = mix_seed(h ^ (r + 1));
    }
    g.mix_signature(h);
  }
  const ad::Var s = ad::mul(phi, g.constant(std::move(coef)));
  const ad::Var s3 = ad::concat({s, s, s});
  const ad::Var residual = ad::sub(g.constant(std::move(offset)), ad::mul(g.constant(std::move(dir)), s3));

  SelfLossVars out;
  out.self_term = ad::scalar_mul(ad::reduce_sum(ad::square(residual)), 1.0 / static_cast<double>(k));
  out.self_count = k;
  out.self_skipped = batch.size() - k;

  const std::vector<std::size_t> idx = point_subsample(cloud.size(), options.point_subsample, options.seed);
  std::vector<Point3> ps;
  ps.reserve(idx.size());
  for (std::size_t i : idx) ps.push_back(cloud[i]);
  out.point_term = ad::reduce_mean(ad::abs(model.predict(g, vars, enc, g.constant(points_to_tensor(ps)))));
  out.point_count = ps.size();
  return out;
}

LossBreakdown sup_breakdown(double sup_term, std::size_t count) {
  LossBreakdown b;
  b.sup_term = sup_term;
  b.total = sup_term;
  b.sup_count = count;
  return b;
}

LossBreakdown self_breakdown(double self_term, double point_term, const LossWeights& weights, std::size_t self_count,
                             std::size_t self_skipped, std::size_t point_count) {
  LossBreakdown b;
  b.self_term = self_term;
  b.point_term = point_term;
  b.lambda = 1.0;
  b.lambda_p = weights.lambda_p;
  b.total = self_term + weights.lambda_p * point_term;
  b.self_count = self_count;
  b.self_skipped = self_skipped;
  b.point_count = point_count;
  return b;
}

LossBreakdown loss_self(const ConditionalSdfModel& model, const LatentFeatures& features, const SelfBatch& batch,
                        const PointCloud& cloud, const LossWeights& weights, const SelfLossOptions& options) {
  validate(weights);
  ad::Graph g;
  const ModelVars vars = model.bind(g, false);
  EncodedVars enc;
  enc.global = g.constant(features.global);
  if (features.variant == EncoderVariant::grid_local) enc.grid = g.constant(features.grid);
  const SelfLossVars terms = self_loss_vars(g, model, vars, enc, batch, cloud, options);
  return self_breakdown(terms.self_term.item(), terms.point_term.item(), weights, terms.self_count,
                        terms.self_skipped, terms.point_count);
}

LossBreakdown combine(const LossBreakdown& sup_part, const LossBreakdown& self_part, double lambda,
                      double lambda_p) {
  LossBreakdown b;
  b.sup_term = sup_part.sup_term;
  b.self_term = self_part.self_term;
  b.point_term = self_part.point_term;
  b.lambda = lambda;
  b.lambda_p = lambda_p;
  b.total = b.sup_term + lambda * (b.self_term + lambda_p * b.point_term);
  b.sup_count = sup_part.sup_count;
  b.self_count = self_part.self_count;
  b.self_skipped = self_part.self_skipped;
  b.point_count = self_part.point_count;
  return b;
}

LossBreakdown loss_meta(const LossBreakdown& sup_part, const LossBreakdown& self_part, const LossWeights& weights) {
  validate(weights);
  return combine(sup_part, self_part, weights.lambda_m, weights.lambda_p);
}

LossBreakdown loss_semi(const LossBreakdown& sup_part, const LossBreakdown& self_part, const LossWeights& weights) {
  validate(weights);
  return combine(sup_part, self_part, weights.lambda_s, weights.lambda_p);
}

}  // namespace gensdf
