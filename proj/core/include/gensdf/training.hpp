#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/dataset.hpp"
#include "gensdf/losses.hpp"
#include "gensdf/model.hpp"

namespace gensdf {

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Learning rate at epoch e is learning_rate * lr_decay^e (1 = constant).
  double lr_decay = 1.0;
};

double learning_rate_at(const OptimizerConfig& config, std::size_t epoch);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  bool initialized() const { return !m.empty(); }
};

// Standard Adam with bias correction. State is lazily sized on first use.
void adam_step(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads, AdamState& state,
               const OptimizerConfig& config);
void sgd_step(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads, double learning_rate);

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeSchedule {
  std::size_t split_frequency = 2;
  double split_ratio = 0.5;  // fraction of categories that stay supervised
  std::uint64_t seed = 0;
};

struct EpisodeSplit {
  std::vector<std::string> labeled_categories;
  std::vector<std::string> unlabeled_categories;
  std::vector<std::size_t> labeled_items;    // indices into the dataset
  std::vector<std::size_t> unlabeled_items;  // indices into the dataset
};

// Category-level partition, recomputed only at epochs divisible by the split
// frequency; a pure function of (schedule, epoch - epoch mod f).
EpisodeSplit episodic_split(const LabeledDataset& dataset, const EpisodeSchedule& schedule, std::size_t epoch);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t stage1_epochs = 50;
  std::size_t stage2_epochs = 20;
  std::size_t queries_per_cloud = 512;  // K
  double near_fraction = 0.875;         // of K, drawn around cloud points
  double sigma_near = 0.05;
  std::size_t point_subsample = 2048;   // point-term subsample, 0 = all
  LossWeights weights;
  EpisodeSchedule schedule;
  SelfEstimator stage1_estimator = SelfEstimator::signed_nn;
  std::uint64_t seed = 0;
  // Checkpoints, metrics and the resolved config go here; empty = in memory.
  std::filesystem::path output_dir;
};

void validate(const TrainConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
QuerySamplingOptions query_options(const TrainConfig& config);
// Hash of the fields that shape the optimization trajectory (excludes epoch
// counts and output paths so a run can be extended on resume).
std::string trajectory_hash(const TrainConfig& config, const ModelConfig& model);

// ---------------------------------------------------------------------------
// Training

struct MetricsRow {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  int stage = 1;
  double sup_term = 0.0;
  double self_term = 0.0;
  double point_term = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

struct TrainingState {
  ConditionalSdfModel model;
  AdamState optimizer;
  int stage = 1;
  std::size_t epochs_done = 0;
  std::uint64_t global_step = 0;
};

struct StageResult {
  TrainingState state;
  std::vector<MetricsRow> metrics;  // rows produced by this call
  std::vector<double> epoch_mean_total;
  std::filesystem::path last_checkpoint;
};

// Stage 1: per step, one supervised cloud from X_L and one pseudo-unlabeled
// cloud from X_U (ground-truth sign branch); ceil(|X| / 2) steps per epoch.
StageResult train_stage1(ConditionalSdfModel model, const LabeledDataset& X, const TrainConfig& config);

// Stage 2: X always supervised, R self-supervised with predicted signs;
// |X| steps per epoch, fresh optimizer state. R may be empty. `epochs`
// overrides config.stage2_epochs.
StageResult train_stage2(ConditionalSdfModel model, const LabeledDataset& X, const UnlabeledDataset& R,
                         const TrainConfig& config, std::optional<std::size_t> epochs = std::nullopt);

// Continues from a training checkpoint written by either stage. R is only
// used for stage-2 checkpoints.
StageResult resume_training(const std::filesystem::path& checkpoint, const LabeledDataset& X,
                            const UnlabeledDataset& R, const TrainConfig& config,
                            std::optional<std::size_t> total_epochs = std::nullopt);

void save_training_checkpoint(const TrainingState& state, const TrainConfig& config,
                              const std::filesystem::path& path);
TrainingState load_training_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int stage, std::size_t epoch);

// ---------------------------------------------------------------------------
// Test-time refinement

struct RefineConfig {
  std::size_t iterations = 200;
  double learning_rate = 1e-4;
  std::size_t max_points = 5000;
  std::size_t queries = 512;
  double near_fraction = 0.875;
  double sigma_near = 0.05;
  std::size_t point_subsample = 2048;
  double lambda_p = 0.01;
  std::uint64_t seed = 0;
};

void validate(const RefineConfig& config);
void to_json(nlohmann::json& j, const RefineConfig& c);
void from_json(const nlohmann::json& j, RefineConfig& c);

struct RefineResult {
  ConditionalSdfModel model;
  std::vector<double> losses;
  bool diverged = false;
};

// Fits a copy of the model to one raw cloud with the self-supervised loss
// (predicted signs). Never touches labels: it only sees the cloud.
RefineResult refine(const ConditionalSdfModel& model, const PointCloud& cloud, const RefineConfig& config);

}  // namespace gensdf
