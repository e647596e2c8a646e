#include "gensdf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <spdlog/spdlog.h>

#include "gensdf/errors.hpp"
#include "gensdf/io.hpp"
#include "gensdf/random.hpp"

namespace gensdf {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Optimizer

void adam_step(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads, AdamState& state,
               const OptimizerConfig& config) {
  if (grads.size() != params.size()) throw ArgumentError("adam_step: gradient count does not match parameters");
  if (!state.initialized()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ArgumentError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].storage();
    const auto& g = grads[i].storage();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (g.size() != p.size() || m.size() != p.size()) throw ArgumentError("adam_step: shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      p[j] -= config.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config.epsilon);
    }
  }
}

double learning_rate_at(const OptimizerConfig& config, std::size_t epoch) {
  return config.learning_rate * std::pow(config.lr_decay, static_cast<double>(epoch));
}

void sgd_step(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads, double learning_rate) {
  if (grads.size() != params.size()) throw ArgumentError("sgd_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].storage();
    const auto& g = grads[i].storage();
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= learning_rate * g[j];
  }
}

// ---------------------------------------------------------------------------
// Episodes

EpisodeSplit episodic_split(const LabeledDataset& dataset, const EpisodeSchedule& schedule, std::size_t epoch) {
  if (schedule.split_frequency == 0) throw ConfigError("split frequency must be positive");
  if (!(schedule.split_ratio > 0.0 && schedule.split_ratio < 1.0))
    throw ConfigError("split ratio must lie in (0, 1)");
  std::vector<std::string> cats = dataset.categories();
  if (cats.size() < 2)
    throw ConfigError("episodic split needs at least 2 categories, got " + std::to_string(cats.size()));

  const std::size_t anchor = epoch - epoch % schedule.split_frequency;
  Rng rng(derive_seed(schedule.seed, {0x53504C4954, anchor}));
  for (std::size_t i = cats.size(); i > 1; --i) std::swap(cats[i - 1], cats[rng.index(i)]);

  const double c = static_cast<double>(cats.size());
  const auto n_l = static_cast<std::size_t>(
      std::clamp(std::llround(schedule.split_ratio * c), 1LL, static_cast<long long>(cats.size()) - 1));
  EpisodeSplit split;
  split.labeled_categories.assign(cats.begin(), cats.begin() + static_cast<std::ptrdiff_t>(n_l));
  split.unlabeled_categories.assign(cats.begin() + static_cast<std::ptrdiff_t>(n_l), cats.end());
  std::sort(split.labeled_categories.begin(), split.labeled_categories.end());
  std::sort(split.unlabeled_categories.begin(), split.unlabeled_categories.end());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& cat = dataset.items()[i].shape.category_id;
    if (std::binary_search(split.labeled_categories.begin(), split.labeled_categories.end(), cat))
      split.labeled_items.push_back(i);
    else
      split.unlabeled_items.push_back(i);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0) || !(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(c.optimizer.epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (!(c.optimizer.lr_decay > 0.0 && c.optimizer.lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (c.queries_per_cloud == 0) throw ConfigError("queries_per_cloud must be at least 1");
  if (!(c.near_fraction >= 0.0 && c.near_fraction <= 1.0)) throw ConfigError("near_fraction must lie in [0, 1]");
  if (!(c.sigma_near > 0.0)) throw ConfigError("sigma_near must be positive");
  if (c.schedule.split_frequency == 0) throw ConfigError("split frequency must be positive");
  if (!(c.schedule.split_ratio > 0.0 && c.schedule.split_ratio < 1.0))
    throw ConfigError("split ratio must lie in (0, 1)");
  validate(c.weights);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"optimizer",
       {{"kind", std::string(to_string(c.optimizer.kind))},
        {"learning_rate", c.optimizer.learning_rate},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"lr_decay", c.optimizer.lr_decay}}},
      {"stage1_epochs", c.stage1_epochs},
      {"stage2_epochs", c.stage2_epochs},
      {"queries_per_cloud", c.queries_per_cloud},
      {"near_fraction", c.near_fraction},
      {"sigma_near", c.sigma_near},
      {"point_subsample", c.point_subsample},
      {"weights", c.weights},
      {"schedule",
       {{"split_frequency", c.schedule.split_frequency},
        {"split_ratio", c.schedule.split_ratio},
        {"seed", c.schedule.seed}}},
      {"stage1_estimator", std::string(to_string(c.stage1_estimator))},
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  try {
    c = TrainConfig{};
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.optimizer.kind = parse_optimizer(o.value("kind", std::string("adam")));
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
      c.optimizer.lr_decay = o.value("lr_decay", c.optimizer.lr_decay);
    }
    c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
    c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
    c.queries_per_cloud = j.value("queries_per_cloud", c.queries_per_cloud);
    c.near_fraction = j.value("near_fraction", c.near_fraction);
    c.sigma_near = j.value("sigma_near", c.sigma_near);
    c.point_subsample = j.value("point_subsample", c.point_subsample);
    if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.schedule.split_frequency = s.value("split_frequency", c.schedule.split_frequency);
      c.schedule.split_ratio = s.value("split_ratio", c.schedule.split_ratio);
      c.schedule.seed = s.value("seed", c.schedule.seed);
    }
    c.stage1_estimator = parse_self_estimator(j.value("stage1_estimator", std::string("signed-nn")));
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  validate(c);
}

QuerySamplingOptions query_options(const TrainConfig& config) {
  QuerySamplingOptions o;
  o.n_near = static_cast<std::size_t>(std::llround(config.near_fraction * static_cast<double>(config.queries_per_cloud)));
  o.n_uniform = config.queries_per_cloud - o.n_near;
  o.sigma_near = config.sigma_near;
  return o;
}

std::string trajectory_hash(const TrainConfig& config, const ModelConfig& model) {
  nlohmann::json j = config;
  j.erase("stage1_epochs");
  j.erase("stage2_epochs");
  j.erase("output_dir");
  j["model"] = model;
  return hash_string(j.dump());
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_header() { return "epoch,step,stage,sup_term,self_term,point_term,total,lr,wall_ms"; }

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << r.epoch << ',' << r.step << ',' << r.stage << ',' << r.sup_term << ',' << r.self_term << ',' << r.point_term
     << ',' << r.total << ',' << r.lr << ',' << std::setprecision(6) << r.wall_ms;
  return os.str();
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open metrics file '" + path.string() + "'");
  std::vector<MetricsRow> rows;
  std::string line;
  std::getline(in, line);
  if (line != metrics_header()) throw LoadError(path.string() + ": unexpected metrics header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    MetricsRow r;
    if (!(ls >> r.epoch >> r.step >> r.stage >> r.sup_term >> r.self_term >> r.point_term >> r.total >> r.lr >>
          r.wall_ms))
      throw LoadError(path.string() + ": malformed metrics row");
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints

fs::path checkpoint_path(const fs::path& dir, int stage, std::size_t epoch) {
  std::ostringstream name;
  name << "stage" << stage << "_epoch" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
  return dir / name.str();
}

void save_training_checkpoint(const TrainingState& state, const TrainConfig& config, const fs::path& path) {
  std::vector<std::vector<double>> arrays;
  for (const auto& p : state.model.parameters()) arrays.push_back(p.storage());
  for (const auto& m : state.optimizer.m) arrays.push_back(m);
  for (const auto& v : state.optimizer.v) arrays.push_back(v);
  nlohmann::json meta{{"model", state.model.config()},
                      {"training",
                       {{"stage", state.stage},
                        {"epochs_done", state.epochs_done},
                        {"global_step", state.global_step},
                        {"optimizer_step", state.optimizer.step},
                        {"optimizer_arrays", state.optimizer.m.size()},
                        {"seed", config.seed},
                        {"config_hash", trajectory_hash(config, state.model.config())}}}};
  write_checkpoint_file(path, std::move(meta), arrays);
}

TrainingState load_training_checkpoint(const fs::path& path, const TrainConfig& config) {
  const CheckpointContents contents = read_checkpoint_file(path);
  if (!contents.meta.contains("training"))
    throw LoadError("'" + path.string() + "' is a model checkpoint without training state");
  TrainingState state{model_from_checkpoint(contents), {}, 1, 0, 0};
  try {
    const auto& t = contents.meta.at("training");
    const std::string expected = trajectory_hash(config, state.model.config());
    if (t.at("config_hash").get<std::string>() != expected)
      throw ConfigError("checkpoint '" + path.string() + "' was written with a different training configuration");
    state.stage = t.at("stage").get<int>();
    state.epochs_done = t.at("epochs_done").get<std::size_t>();
    state.global_step = t.at("global_step").get<std::uint64_t>();
    state.optimizer.step = t.at("optimizer_step").get<std::uint64_t>();
    const std::size_t n_opt = t.at("optimizer_arrays").get<std::size_t>();
    const std::size_t n_params = state.model.parameters().size();
    if (n_opt != 0 && n_opt != n_params) throw LoadError("checkpoint optimizer state does not match the model");
    if (contents.arrays.size() != n_params + 2 * n_opt) throw LoadError("checkpoint array count mismatch");
    for (std::size_t i = 0; i < n_opt; ++i) {
      state.optimizer.m.push_back(contents.arrays[n_params + i]);
      state.optimizer.v.push_back(contents.arrays[n_params + n_opt + i]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed training metadata in '" + path.string() + "': " + e.what());
  }
  return state;
}

// ---------------------------------------------------------------------------
// Stage runner

namespace {

enum Role : std::uint64_t { kRoleSup = 1, kRoleSelf = 2 };

std::vector<std::size_t> permuted(std::vector<std::size_t> items, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.index(i)]);
  return items;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

struct StepPlan {
  std::size_t sup_item = 0;
  std::optional<std::size_t> self_item;
};

struct StepLosses {
  ad::Var total;
  double sup = 0.0, self = 0.0, point = 0.0;
};

class MetricsSink {
 public:
  MetricsSink(const fs::path& dir, int stage, std::size_t epochs_done) {
    if (dir.empty()) return;
    path_ = dir / ("metrics_stage" + std::to_string(stage) + ".csv");
    std::vector<MetricsRow> keep;
    if (epochs_done > 0 && fs::exists(path_))
      for (const auto& r : read_metrics_csv(path_))
        if (r.epoch < epochs_done) keep.push_back(r);
    out_.open(path_, std::ios::trunc);
    if (!out_) throw ArgumentError("cannot write metrics '" + path_.string() + "'");
    out_ << metrics_header() << '\n';
    for (const auto& r : keep) out_ << format_metrics_row(r) << '\n';
  }

  void write(const MetricsRow& row) {
    if (out_.is_open()) out_ << format_metrics_row(row) << '\n';
  }
  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

void write_run_config(const TrainConfig& config, const ModelConfig& model, const fs::path& dir) {
  nlohmann::json j{{"train", config}, {"model", model}};
  std::ofstream out(dir / "config.json");
  if (!out) throw ArgumentError("cannot write '" + (dir / "config.json").string() + "'");
  out << j.dump(2) << '\n';
}

struct StageDriver {
  const LabeledDataset& X;
  const UnlabeledDataset* R;  // stage 2 only
  const TrainConfig& config;
  int stage;

  std::size_t steps_per_epoch() const { return stage == 1 ? (X.size() + 1) / 2 : X.size(); }

  std::uint64_t step_seed(std::size_t epoch, std::size_t step, std::uint64_t role) const {
    return derive_seed(config.seed, {static_cast<std::uint64_t>(stage), epoch, step, role});
  }

  StepLosses build(ad::Graph& g, const ConditionalSdfModel& model, const ModelVars& vars, const StepPlan& plan,
                   std::size_t epoch, std::size_t step) const {
    const QuerySamplingOptions opts = query_options(config);
    const LabeledItem& sup_item = X.items()[plan.sup_item];
    const auto sup_samples =
        sample_queries(sup_item.shape, *sup_item.tree, opts, step_seed(epoch, step, kRoleSup), true);
    const EncodedVars sup_enc = model.encode(g, vars, sup_item.cloud);
    StepLosses out;
    const ad::Var sup = sup_loss_var(g, model, vars, sup_enc, sup_samples);
    out.sup = sup.item();
    out.total = sup;
    if (!plan.self_item) return out;

    SelfLossOptions self_opts;
    self_opts.point_subsample = config.point_subsample;
    self_opts.seed = step_seed(epoch, step, kRoleSelf);
    double lambda = 0.0;
    SelfBatch batch;
    const PointCloud* cloud = nullptr;
    if (stage == 1) {
      // Pseudo-unlabeled: ground-truth signs choose the branch, distances
      // come from nearest neighbors only.
      const LabeledItem& item = X.items()[*plan.self_item];
      const auto samples = sample_queries(item.shape, *item.tree, opts, self_opts.seed, true);
      self_opts.sign_source = SignSource::ground_truth;
      self_opts.estimator = config.stage1_estimator;
      batch = SelfBatch::with_signs(samples);
      cloud = &item.cloud;
      lambda = config.weights.lambda_m;
    } else {
      const UnlabeledItem& item = R->items()[*plan.self_item];
      batch = SelfBatch::unlabeled(sample_unlabeled_queries(*item.tree, opts, self_opts.seed));
      self_opts.sign_source = SignSource::predicted;
      self_opts.estimator = SelfEstimator::signed_nn;
      cloud = &item.cloud;
      lambda = config.weights.lambda_s;
    }
    const EncodedVars self_enc = model.encode(g, vars, *cloud);
    const SelfLossVars terms = self_loss_vars(g, model, vars, self_enc, batch, *cloud, self_opts);
    out.self = terms.self_term.item();
    out.point = terms.point_term.item();
    const ad::Var self_total = ad::add(terms.self_term, ad::scalar_mul(terms.point_term, config.weights.lambda_p));
    out.total = ad::add(sup, ad::scalar_mul(self_total, lambda));
    return out;
  }

  std::vector<StepPlan> plan_epoch(std::size_t epoch) const {
    std::vector<StepPlan> plans(steps_per_epoch());
    if (stage == 1) {
      const EpisodeSplit split = episodic_split(X, config.schedule, epoch);
      const auto sup = permuted(split.labeled_items, step_seed(epoch, 0, 0x4C));
      const auto self = permuted(split.unlabeled_items, step_seed(epoch, 0, 0x55));
      for (std::size_t s = 0; s < plans.size(); ++s) {
        plans[s].sup_item = sup[s % sup.size()];
        plans[s].self_item = self[s % self.size()];
      }
    } else {
      const auto sup = permuted(iota_indices(X.size()), step_seed(epoch, 0, 0x58));
      const auto self = R->empty() ? std::vector<std::size_t>{} : permuted(iota_indices(R->size()), step_seed(epoch, 0, 0x52));
      for (std::size_t s = 0; s < plans.size(); ++s) {
        plans[s].sup_item = sup[s];
        if (!self.empty()) plans[s].self_item = self[s % self.size()];
      }
    }
    return plans;
  }
};

StageResult run_stage(TrainingState state, const StageDriver& driver, std::size_t total_epochs) {
  const TrainConfig& config = driver.config;
  validate(config);
  if (driver.X.empty()) throw DatasetError("training needs a nonempty labeled dataset");
  if (driver.R) check_disjoint(driver.X, *driver.R);

  StageResult result{std::move(state), {}, {}, {}};
  TrainingState& st = result.state;
  const fs::path& dir = config.output_dir;
  if (!dir.empty()) {
    fs::create_directories(dir);
    write_run_config(config, st.model.config(), dir);
  }
  MetricsSink sink(dir, st.stage, st.epochs_done);
  if (st.epochs_done > 0 && !dir.empty()) result.last_checkpoint = checkpoint_path(dir, st.stage, st.epochs_done);

  for (std::size_t epoch = st.epochs_done; epoch < total_epochs; ++epoch) {
    const std::vector<StepPlan> plans = driver.plan_epoch(epoch);
    OptimizerConfig opt = config.optimizer;
    opt.learning_rate = learning_rate_at(config.optimizer, epoch);
    double epoch_sum = 0.0;
    for (std::size_t s = 0; s < plans.size(); ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      ad::Graph g;
      const ModelVars vars = st.model.bind(g, true);
      StepLosses losses;
      try {
        losses = driver.build(g, st.model, vars, plans[s], epoch, s);
        if (!std::isfinite(losses.total.item())) throw NumericError("non-finite total loss");
        g.backward(losses.total);
      } catch (const NumericError& e) {
        sink.flush();
        const std::string kept =
            result.last_checkpoint.empty() ? "no checkpoint written yet" : "last good checkpoint " + result.last_checkpoint.string();
        throw TrainingError("stage " + std::to_string(st.stage) + " diverged at epoch " + std::to_string(epoch) +
                            " step " + std::to_string(s) + " (" + e.what() + "); " + kept);
      }
      std::vector<ad::Tensor> grads;
      grads.reserve(vars.params.size());
      for (const auto& p : vars.params) grads.push_back(g.grad(p));
      if (opt.kind == OptimizerKind::adam)
        adam_step(st.model.parameters(), grads, st.optimizer, opt);
      else
        sgd_step(st.model.parameters(), grads, opt.learning_rate);

      MetricsRow row;
      row.epoch = epoch;
      row.step = st.global_step++;
      row.stage = st.stage;
      row.sup_term = losses.sup;
      row.self_term = losses.self;
      row.point_term = losses.point;
      row.total = losses.total.item();
      row.lr = opt.learning_rate;
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      sink.write(row);
      result.metrics.push_back(row);
      epoch_sum += row.total;
    }
    sink.flush();
    st.epochs_done = epoch + 1;
    result.epoch_mean_total.push_back(epoch_sum / static_cast<double>(plans.size()));
    spdlog::info("stage {} epoch {}/{} mean loss {:.6g}", st.stage, epoch + 1, total_epochs,
                 result.epoch_mean_total.back());
    if (!dir.empty()) {
      result.last_checkpoint = checkpoint_path(dir, st.stage, st.epochs_done);
      save_training_checkpoint(st, config, result.last_checkpoint);
    }
  }
  return result;
}

}  // namespace

StageResult train_stage1(ConditionalSdfModel model, const LabeledDataset& X, const TrainConfig& config) {
  TrainingState state{std::move(model), {}, 1, 0, 0};
  return run_stage(std::move(state), StageDriver{X, nullptr, config, 1}, config.stage1_epochs);
}

StageResult train_stage2(ConditionalSdfModel model, const LabeledDataset& X, const UnlabeledDataset& R,
                         const TrainConfig& config, std::optional<std::size_t> epochs) {
  TrainingState state{std::move(model), {}, 2, 0, 0};
  return run_stage(std::move(state), StageDriver{X, &R, config, 2}, epochs.value_or(config.stage2_epochs));
}

StageResult resume_training(const fs::path& checkpoint, const LabeledDataset& X, const UnlabeledDataset& R,
                            const TrainConfig& config, std::optional<std::size_t> total_epochs) {
  TrainingState state = load_training_checkpoint(checkpoint, config);
  const int stage = state.stage;
  const std::size_t epochs = total_epochs.value_or(stage == 1 ? config.stage1_epochs : config.stage2_epochs);
  if (stage == 1) return run_stage(std::move(state), StageDriver{X, nullptr, config, 1}, epochs);
  return run_stage(std::move(state), StageDriver{X, &R, config, 2}, epochs);
}

// ---------------------------------------------------------------------------
// Refinement

void validate(const RefineConfig& c) {
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate))
    throw ConfigError("refine learning rate must be positive");
  if (c.max_points == 0) throw ConfigError("refine max_points must be positive");
  if (c.queries == 0) throw ConfigError("refine queries must be positive");
  if (!(c.near_fraction >= 0.0 && c.near_fraction <= 1.0)) throw ConfigError("refine near_fraction must be in [0, 1]");
  if (!(c.sigma_near > 0.0)) throw ConfigError("refine sigma_near must be positive");
  if (!(c.lambda_p >= 0.0)) throw ConfigError("refine lambda_p must be nonnegative");
}

void to_json(nlohmann::json& j, const RefineConfig& c) {
  j = nlohmann::json{{"iterations", c.iterations},   {"learning_rate", c.learning_rate},
                     {"max_points", c.max_points},   {"queries", c.queries},
                     {"near_fraction", c.near_fraction}, {"sigma_near", c.sigma_near},
                     {"point_subsample", c.point_subsample}, {"lambda_p", c.lambda_p},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RefineConfig& c) {
  try {
    c = RefineConfig{};
    c.iterations = j.value("iterations", c.iterations);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_points = j.value("max_points", c.max_points);
    c.queries = j.value("queries", c.queries);
    c.near_fraction = j.value("near_fraction", c.near_fraction);
    c.sigma_near = j.value("sigma_near", c.sigma_near);
    c.point_subsample = j.value("point_subsample", c.point_subsample);
    c.lambda_p = j.value("lambda_p", c.lambda_p);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed refine config: ") + e.what());
  }
  validate(c);
}

RefineResult refine(const ConditionalSdfModel& model, const PointCloud& cloud, const RefineConfig& config) {
  validate(config);
  RefineResult result{model, {}, false};
  if (config.iterations == 0) return result;

  const std::vector<std::size_t> keep = point_subsample(cloud.size(), config.max_points, derive_seed(config.seed, {0x5245}));
  std::vector<Point3> pts;
  pts.reserve(keep.size());
  for (std::size_t i : keep) pts.push_back(cloud[i]);
  const PointCloud input(std::move(pts));
  const KdTree tree(input);

  QuerySamplingOptions opts;
  opts.n_near = static_cast<std::size_t>(std::llround(config.near_fraction * static_cast<double>(config.queries)));
  opts.n_uniform = config.queries - opts.n_near;
  opts.sigma_near = config.sigma_near;
  OptimizerConfig adam;
  adam.learning_rate = config.learning_rate;
  AdamState state;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    const std::uint64_t seed = derive_seed(config.seed, {0x524546, it});
    ad::Graph g;
    const ModelVars vars = result.model.bind(g, true);
    double loss = 0.0;
    try {
      const EncodedVars enc = result.model.encode(g, vars, input);
      const SelfBatch batch = SelfBatch::unlabeled(sample_unlabeled_queries(tree, opts, seed));
      SelfLossOptions so;
      so.sign_source = SignSource::predicted;
      so.point_subsample = config.point_subsample;
      so.seed = seed;
      const SelfLossVars terms = self_loss_vars(g, result.model, vars, enc, batch, input, so);
      const ad::Var total = ad::add(terms.self_term, ad::scalar_mul(terms.point_term, config.lambda_p));
      loss = total.item();
      if (!std::isfinite(loss)) throw NumericError("non-finite refinement loss");
      g.backward(total);
    } catch (const NumericError& e) {
      spdlog::warn("refinement stopped at iteration {}: {}; keeping the last finite model", it, e.what());
      result.diverged = true;
      return result;
    }
    std::vector<ad::Tensor> grads;
    for (const auto& p : vars.params) grads.push_back(g.grad(p));
    adam_step(result.model.parameters(), grads, state, adam);
    result.losses.push_back(loss);
  }
  return result;
}

}  // namespace gensdf
