#include "gensdf/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "gensdf/errors.hpp"
#include "gensdf/io.hpp"
#include "gensdf/kdtree.hpp"
#include "gensdf/random.hpp"

namespace gensdf {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Chamfer distance

std::string_view to_string(ChamferFlavor f) { return f == ChamferFlavor::squared ? "squared" : "unsquared"; }

ChamferFlavor parse_chamfer_flavor(std::string_view name) {
  if (name == "squared") return ChamferFlavor::squared;
  if (name == "unsquared") return ChamferFlavor::unsquared;
  throw ConfigError("unknown chamfer flavor '" + std::string(name) + "' (expected squared or unsquared)");
}

void validate(const ChamferConfig& config) {
  if (config.samples < 1) throw ConfigError("chamfer sample count must be at least 1");
}

PointCloud sample_mesh_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("cannot sample zero points from a mesh");
  std::vector<double> cumulative;
  std::vector<std::size_t> tri_index;
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const double a = triangle_area(mesh, t);
    if (!(a > 0.0)) continue;
    total += a;
    cumulative.push_back(total);
    tri_index.push_back(t);
  }
  if (cumulative.empty()) throw EvaluationError("cannot sample the surface of an empty mesh");

  Rng rng(seed);
  std::vector<Point3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = rng.uniform() * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    const auto& tri = mesh.triangles[tri_index[static_cast<std::size_t>(it - cumulative.begin())]];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Point3 a = mesh.vertices[tri[0]], b = mesh.vertices[tri[1]], c = mesh.vertices[tri[2]];
    out.push_back(a + (b - a) * u + (c - a) * v);
  }
  return PointCloud(std::move(out));
}

namespace {

double flavored(double squared, ChamferFlavor flavor) {
  return flavor == ChamferFlavor::squared ? squared : std::sqrt(squared);
}

double directed(const PointCloud& from, const KdTree& to, ChamferFlavor flavor) {
  double s = 0.0;
  for (const Point3& p : from) s += flavored(to.nearest(p).squared_distance, flavor);
  return s / static_cast<double>(from.size());
}

double directed_brute(const PointCloud& from, const PointCloud& to, ChamferFlavor flavor) {
  double s = 0.0;
  for (const Point3& p : from) s += flavored(nearest_linear_scan(to.points(), p).squared_distance, flavor);
  return s / static_cast<double>(from.size());
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b, ChamferFlavor flavor) {
  const KdTree ta(a), tb(b);
  return directed(a, tb, flavor) + directed(b, ta, flavor);
}

double chamfer_brute_force(const PointCloud& a, const PointCloud& b, ChamferFlavor flavor) {
  return directed_brute(a, b, flavor) + directed_brute(b, a, flavor);
}

// ---------------------------------------------------------------------------
// Reconstruction quality

void to_json(nlohmann::json& j, const ReconstructionOptions& o) {
  j = nlohmann::json{{"resolution", o.resolution},
                     {"lo", o.lo},
                     {"hi", o.hi},
                     {"chamfer",
                      {{"samples", o.chamfer.samples},
                       {"seed", o.chamfer.seed},
                       {"flavor", std::string(to_string(o.chamfer.flavor))}}}};
}

void from_json(const nlohmann::json& j, ReconstructionOptions& o) {
  try {
    o = ReconstructionOptions{};
    o.resolution = j.value("resolution", o.resolution);
    o.lo = j.value("lo", o.lo);
    o.hi = j.value("hi", o.hi);
    if (j.contains("chamfer")) {
      const auto& c = j.at("chamfer");
      o.chamfer.samples = c.value("samples", o.chamfer.samples);
      o.chamfer.seed = c.value("seed", o.chamfer.seed);
      o.chamfer.flavor = parse_chamfer_flavor(c.value("flavor", std::string("squared")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed reconstruction options: ") + e.what());
  }
  validate(o.chamfer);
  if (o.resolution < 8) throw ConfigError("reconstruction resolution must be at least 8");
  if (!(o.hi > o.lo)) throw ConfigError("reconstruction bounds must satisfy lo < hi");
}

TriangleMesh reconstruct(const ConditionalSdfModel& model, const PointCloud& cloud,
                         const ReconstructionOptions& options) {
  return marching_cubes(evaluate_grid(model, cloud, options.resolution, options.lo, options.hi));
}

CdResult mesh_cd(const TriangleMesh& mesh, const ShapeInstance& shape, const ChamferConfig& config) {
  validate(config);
  CdResult r;
  r.triangles = mesh.triangles.size();
  if (mesh.empty()) {
    r.empty_mesh = true;
    r.cd = std::numeric_limits<double>::infinity();
    return r;
  }
  const PointCloud truth = sample_surface(shape, config.samples, derive_seed(config.seed, {0x545255}));
  try {
    const PointCloud recon = sample_mesh_surface(mesh, config.samples, derive_seed(config.seed, {0x4D455348}));
    r.cd = chamfer(recon, truth, config.flavor);
  } catch (const EvaluationError&) {
    r.empty_mesh = true;
    r.cd = std::numeric_limits<double>::infinity();
  }
  return r;
}

CdResult reconstruction_cd(const ConditionalSdfModel& model, const ShapeInstance& shape, const PointCloud& cloud,
                           const ReconstructionOptions& options) {
  return mesh_cd(reconstruct(model, cloud, options), shape, options.chamfer);
}

// ---------------------------------------------------------------------------
// Sign accuracy

namespace {

double sign_accuracy_impl(const std::function<std::vector<double>(const std::vector<Point3>&)>& predict,
                          const ShapeInstance& shape, const PointCloud& cloud, const SignAccuracyOptions& o) {
  if (o.queries == 0) throw ArgumentError("sign accuracy needs at least one query");
  QuerySamplingOptions q;
  q.n_near = static_cast<std::size_t>(std::llround(o.near_fraction * static_cast<double>(o.queries)));
  q.n_uniform = o.queries - q.n_near;
  q.sigma_near = o.sigma_near;
  const auto samples = sample_queries(shape, cloud, q, o.seed, true);
  std::vector<Point3> xs;
  std::vector<double> truth;
  for (const auto& s : samples) {
    if (std::abs(*s.gt_sdf) < o.band) continue;
    xs.push_back(s.x);
    truth.push_back(*s.gt_sdf);
  }
  if (xs.empty()) throw EvaluationError("every sign-accuracy query fell inside the surface band");
  const std::vector<double> pred = predict(xs);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) agree += (pred[i] >= 0.0) == (truth[i] >= 0.0);
  return static_cast<double>(agree) / static_cast<double>(xs.size());
}

}  // namespace

double sign_accuracy(const FieldFunction& predictor, const ShapeInstance& shape, const PointCloud& cloud,
                     const SignAccuracyOptions& options) {
  return sign_accuracy_impl(
      [&](const std::vector<Point3>& xs) {
        std::vector<double> out;
        out.reserve(xs.size());
        for (const Point3& x : xs) out.push_back(predictor(x));
        return out;
      },
      shape, cloud, options);
}

double sign_accuracy(const ConditionalSdfModel& model, const ShapeInstance& shape, const PointCloud& cloud,
                     const SignAccuracyOptions& options) {
  const LatentFeatures features = model.encode(cloud);
  return sign_accuracy_impl([&](const std::vector<Point3>& xs) { return model.predict_batch(xs, features); },
                            shape, cloud, options);
}

// ---------------------------------------------------------------------------
// Noise robustness

void validate(const NoiseConfig& config) {
  if (config.variances.empty()) throw ConfigError("noise sweep needs at least one variance");
  for (std::size_t i = 0; i < config.variances.size(); ++i) {
    const double v = config.variances[i];
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("noise variances must be finite and nonnegative");
    if (i > 0 && !(v > config.variances[i - 1])) throw ConfigError("noise variances must be strictly increasing");
  }
}

void to_json(nlohmann::json& j, const NoiseConfig& c) {
  j = nlohmann::json{{"variances", c.variances}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NoiseConfig& c) {
  try {
    c = NoiseConfig{};
    if (j.contains("variances")) c.variances = j.at("variances").get<std::vector<double>>();
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed noise config: ") + e.what());
  }
  validate(c);
}

PointCloud add_gaussian_noise(const PointCloud& cloud, double variance, std::uint64_t seed) {
  if (!(variance >= 0.0)) throw ArgumentError("noise variance must be nonnegative");
  if (variance == 0.0) return cloud;
  const double sd = std::sqrt(variance);
  Rng rng(seed);
  std::vector<Point3> out;
  out.reserve(cloud.size());
  for (const Point3& p : cloud) {
    const double dx = rng.normal(), dy = rng.normal(), dz = rng.normal();
    out.push_back({p.x + sd * dx, p.y + sd * dy, p.z + sd * dz});
  }
  return PointCloud(std::move(out));
}

std::vector<NoisePoint> noise_sweep(const ConditionalSdfModel& model, const ShapeInstance& shape,
                                    const PointCloud& base_cloud, const NoiseConfig& noise,
                                    const ReconstructionOptions& options) {
  validate(noise);
  std::vector<NoisePoint> out;
  for (std::size_t i = 0; i < noise.variances.size(); ++i) {
    const double var = noise.variances[i];
    const PointCloud cloud = add_gaussian_noise(base_cloud, var, derive_seed(noise.seed, {i}));
    NoisePoint point{var, reconstruction_cd(model, shape, cloud, options)};
    if (point.result.empty_mesh) spdlog::warn("noise sweep: empty reconstruction at variance {}", var);
    out.push_back(point);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

std::string_view to_string(Arm arm) {
  switch (arm) {
    case Arm::proposed: return "proposed";
    case Arm::only_meta: return "only-meta";
    case Arm::only_semi: return "only-semi";
    case Arm::sup_only: return "sup-only";
    case Arm::gradient_pull: return "gradient-pull";
  }
  return "?";
}

Arm parse_arm(std::string_view name) {
  for (Arm a : {Arm::proposed, Arm::only_meta, Arm::only_semi, Arm::sup_only, Arm::gradient_pull})
    if (to_string(a) == name) return a;
  throw ConfigError("unknown ablation arm '" + std::string(name) +
                    "' (expected proposed, only-meta, only-semi, sup-only or gradient-pull)");
}

void to_json(nlohmann::json& j, const AblationConfig& c) {
  std::vector<std::string> arms;
  for (Arm a : c.arms) arms.emplace_back(to_string(a));
  j = nlohmann::json{{"arms", arms},
                     {"seeds", c.seeds},
                     {"model", c.model},
                     {"train", c.train},
                     {"reconstruction", c.reconstruction},
                     {"sign",
                      {{"queries", c.sign.queries},
                       {"near_fraction", c.sign.near_fraction},
                       {"sigma_near", c.sign.sigma_near},
                       {"band", c.sign.band},
                       {"seed", c.sign.seed}}},
                     {"seen_per_category", c.seen_per_category},
                     {"unseen_per_category", c.unseen_per_category},
                     {"revision", c.revision},
                     {"output_dir", c.output_dir.string()}};
}

void from_json(const nlohmann::json& j, AblationConfig& c) {
  try {
    c = AblationConfig{};
    if (j.contains("arms")) {
      c.arms.clear();
      for (const auto& a : j.at("arms")) c.arms.push_back(parse_arm(a.get<std::string>()));
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("reconstruction")) c.reconstruction = j.at("reconstruction").get<ReconstructionOptions>();
    if (j.contains("sign")) {
      const auto& s = j.at("sign");
      c.sign.queries = s.value("queries", c.sign.queries);
      c.sign.near_fraction = s.value("near_fraction", c.sign.near_fraction);
      c.sign.sigma_near = s.value("sigma_near", c.sign.sigma_near);
      c.sign.band = s.value("band", c.sign.band);
      c.sign.seed = s.value("seed", c.sign.seed);
    }
    c.seen_per_category = j.value("seen_per_category", c.seen_per_category);
    c.unseen_per_category = j.value("unseen_per_category", c.unseen_per_category);
    c.revision = j.value("revision", c.revision);
    c.output_dir = j.value("output_dir", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed ablation config: ") + e.what());
  }
  if (c.arms.empty()) throw ConfigError("ablation needs at least one arm");
  if (c.seeds.empty()) throw ConfigError("ablation needs at least one seed");
}

double median(std::vector<double> values) {
  if (values.empty()) throw EvaluationError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double mean(const std::vector<double>& values) {
  if (values.empty()) throw EvaluationError("mean of an empty set");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

void ExperimentReport::summarize() {
  // (arm, category) -> seed -> records, in first-seen order.
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::map<std::uint64_t, std::vector<const ShapeRecord*>>> groups;
  for (const auto& r : records) {
    const auto key = std::make_pair(r.arm, r.category);
    if (!groups.count(key)) order.push_back(key);
    groups[key][r.seed].push_back(&r);
  }
  categories.clear();
  for (const auto& key : order) {
    CategorySummary s;
    s.arm = key.first;
    s.category = key.second;
    std::vector<double> cds, accs, seed_means;
    for (const auto& [seed, recs] : groups[key]) {
      std::vector<double> seed_cds;
      for (const ShapeRecord* r : recs) {
        s.seen = r->seen;
        cds.push_back(r->cd);
        seed_cds.push_back(r->cd);
        accs.push_back(r->sign_acc);
        s.empty_meshes += r->empty_mesh;
      }
      seed_means.push_back(mean(seed_cds));
    }
    s.count = cds.size();
    s.mean_cd = mean(cds);
    s.median_cd = median(cds);
    s.seed_median_cd = median(seed_means);
    s.mean_sign_acc = mean(accs);
    categories.push_back(s);
  }
}

const CategorySummary* ExperimentReport::find(std::string_view arm, std::string_view category) const {
  for (const auto& c : categories)
    if (c.arm == arm && c.category == category) return &c;
  return nullptr;
}

namespace {

// JSON has no infinity; empty meshes are reported as null plus a flag.
nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void to_json(nlohmann::json& j, const ExperimentReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& s : r.records)
    recs.push_back({{"arm", s.arm},
                    {"category", s.category},
                    {"shape_id", s.shape_id},
                    {"seed", s.seed},
                    {"seen", s.seen},
                    {"cd", finite_or_null(s.cd)},
                    {"empty_mesh", s.empty_mesh},
                    {"sign_acc", s.sign_acc}});
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : r.categories)
    cats.push_back({{"arm", c.arm},
                    {"category", c.category},
                    {"seen", c.seen},
                    {"mean_cd", finite_or_null(c.mean_cd)},
                    {"median_cd", finite_or_null(c.median_cd)},
                    {"seed_median_cd", finite_or_null(c.seed_median_cd)},
                    {"mean_sign_acc", c.mean_sign_acc},
                    {"count", c.count},
                    {"empty_meshes", c.empty_meshes}});
  j = nlohmann::json{{"records", recs},
                     {"categories", cats},
                     {"failed_arms", r.failed_arms},
                     {"config_hash", r.config_hash},
                     {"seeds", r.seeds},
                     {"revision", r.revision},
                     {"cd_flavor", r.cd_flavor}};
}

void write_report_csv(const ExperimentReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write report '" + path.string() + "'");
  out << "arm,category,shape_id,seed,seen,cd,empty_mesh,sign_acc\n" << std::setprecision(17);
  for (const auto& r : report.records)
    out << r.arm << ',' << r.category << ',' << r.shape_id << ',' << r.seed << ',' << (r.seen ? 1 : 0) << ','
        << (std::isfinite(r.cd) ? r.cd : std::numeric_limits<double>::infinity()) << ',' << (r.empty_mesh ? 1 : 0)
        << ',' << r.sign_acc << '\n';
}

void write_report_json(const ExperimentReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write report '" + path.string() + "'");
  out << nlohmann::json(report).dump(2) << '\n';
}

void evaluate_dataset(const ConditionalSdfModel& model, const LabeledDataset& dataset, bool seen,
                      std::size_t per_category, const std::string& arm, std::uint64_t seed,
                      const ReconstructionOptions& reconstruction, const SignAccuracyOptions& sign,
                      std::vector<ShapeRecord>& out) {
  std::map<std::string, std::size_t> taken;
  for (const LabeledItem& item : dataset.items()) {
    const std::string& category = item.shape.category_id;
    if (per_category && taken[category] >= per_category) continue;
    ++taken[category];
    ShapeRecord r;
    r.arm = arm;
    r.category = category;
    r.shape_id = item.id;
    r.seed = seed;
    r.seen = seen;
    const CdResult cd = reconstruction_cd(model, item.shape, item.cloud, reconstruction);
    r.cd = cd.cd;
    r.empty_mesh = cd.empty_mesh;
    SignAccuracyOptions so = sign;
    so.seed = derive_seed(sign.seed, {std::stoull(hash_string(item.id), nullptr, 16)});
    r.sign_acc = sign_accuracy(model, item.shape, item.cloud, so);
    out.push_back(r);
  }
}

ConditionalSdfModel train_arm(Arm arm, const LoadedDatasets& data, const AblationConfig& config,
                              std::uint64_t seed) {
  ModelConfig mc = config.model;
  mc.init_seed = seed;
  TrainConfig tc = config.train;
  tc.seed = seed;
  tc.schedule.seed = seed;
  if (!config.output_dir.empty())
    tc.output_dir = config.output_dir / std::string(to_string(arm)) / ("seed" + std::to_string(seed));

  const std::size_t n = data.labeled.size();
  const std::size_t proposed_steps = tc.stage1_epochs * ((n + 1) / 2) + tc.stage2_epochs * n;
  const std::size_t matched_epochs = (proposed_steps + n - 1) / n;

  switch (arm) {
    case Arm::only_meta:
      return train_stage1(ConditionalSdfModel(mc), data.labeled, tc).state.model;
    case Arm::gradient_pull:
      tc.stage1_estimator = SelfEstimator::gradient_pull;
      return train_stage1(ConditionalSdfModel(mc), data.labeled, tc).state.model;
    case Arm::proposed: {
      TrainConfig t1 = tc;
      if (!tc.output_dir.empty()) t1.output_dir = tc.output_dir / "stage1";
      ConditionalSdfModel m = train_stage1(ConditionalSdfModel(mc), data.labeled, t1).state.model;
      TrainConfig t2 = tc;
      if (!tc.output_dir.empty()) t2.output_dir = tc.output_dir / "stage2";
      return train_stage2(std::move(m), data.labeled, data.unlabeled, t2).state.model;
    }
    case Arm::only_semi:
      return train_stage2(ConditionalSdfModel(mc), data.labeled, data.unlabeled, tc, matched_epochs).state.model;
    case Arm::sup_only:
      return train_stage2(ConditionalSdfModel(mc), data.labeled, UnlabeledDataset{}, tc, matched_epochs).state.model;
  }
  throw ConfigError("unhandled ablation arm");
}

ExperimentReport run_ablation(const LoadedDatasets& data, const AblationConfig& config) {
  if (config.arms.empty() || config.seeds.empty()) throw ConfigError("ablation needs arms and seeds");
  ExperimentReport report;
  report.seeds = config.seeds;
  report.revision = config.revision;
  report.cd_flavor = std::string(to_string(config.reconstruction.chamfer.flavor));
  {
    nlohmann::json j = config;
    j.erase("output_dir");
    report.config_hash = hash_string(j.dump());
  }
  for (Arm arm : config.arms) {
    const std::string name(to_string(arm));
    for (std::uint64_t seed : config.seeds) {
      try {
        spdlog::info("ablation: training arm {} seed {}", name, seed);
        const ConditionalSdfModel model = train_arm(arm, data, config, seed);
        evaluate_dataset(model, data.labeled, true, config.seen_per_category, name, seed, config.reconstruction,
                         config.sign, report.records);
        evaluate_dataset(model, data.test, false, config.unseen_per_category, name, seed, config.reconstruction,
                         config.sign, report.records);
      } catch (const Error& e) {
        spdlog::error("ablation arm {} seed {} failed: {}", name, seed, e.what());
        report.failed_arms.push_back(name + "/" + std::to_string(seed) + ": " + e.what());
        // Drop partial records so summaries never mix complete and partial runs.
        std::erase_if(report.records, [&](const ShapeRecord& r) { return r.arm == name && r.seed == seed; });
      }
    }
  }
  report.summarize();
  return report;
}

}  // namespace gensdf
