#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/dataset.hpp"
#include "gensdf/model.hpp"
#include "gensdf/reconstruction.hpp"
#include "gensdf/training.hpp"

namespace gensdf {

// ---------------------------------------------------------------------------
// Chamfer distance

enum class ChamferFlavor { squared, unsquared };

std::string_view to_string(ChamferFlavor f);
ChamferFlavor parse_chamfer_flavor(std::string_view name);

struct ChamferConfig {
  std::size_t samples = 30000;  // per surface
  std::uint64_t seed = 0;
  ChamferFlavor flavor = ChamferFlavor::squared;
};

void validate(const ChamferConfig& config);

// Area-weighted triangle choice, then uniform barycentric coordinates.
// EvaluationError for a mesh without positive-area triangles.
PointCloud sample_mesh_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed);

// Mean nearest-neighbor distance A -> B plus mean B -> A (squared distances
// for the squared flavor).
double chamfer(const PointCloud& a, const PointCloud& b, ChamferFlavor flavor = ChamferFlavor::squared);
double chamfer_brute_force(const PointCloud& a, const PointCloud& b,
                           ChamferFlavor flavor = ChamferFlavor::squared);

// ---------------------------------------------------------------------------
// Reconstruction quality

struct ReconstructionOptions {
  std::size_t resolution = 128;
  double lo = -1.0;
  double hi = 1.0;
  ChamferConfig chamfer;
};

void to_json(nlohmann::json& j, const ReconstructionOptions& o);
void from_json(const nlohmann::json& j, ReconstructionOptions& o);

TriangleMesh reconstruct(const ConditionalSdfModel& model, const PointCloud& cloud,
                         const ReconstructionOptions& options);

struct CdResult {
  double cd = 0.0;  // +inf when the mesh is empty
  bool empty_mesh = false;
  std::size_t triangles = 0;
};

// CD between a mesh and clean samples of the shape's true surface.
CdResult mesh_cd(const TriangleMesh& mesh, const ShapeInstance& shape, const ChamferConfig& config);
CdResult reconstruction_cd(const ConditionalSdfModel& model, const ShapeInstance& shape, const PointCloud& cloud,
                           const ReconstructionOptions& options);

// ---------------------------------------------------------------------------
// Sign accuracy

struct SignAccuracyOptions {
  std::size_t queries = 4096;
  double near_fraction = 0.5;
  double sigma_near = 0.05;
  double band = 1e-3;  // queries with |sdf| below this are skipped
  std::uint64_t seed = 0;
};

// Fraction of queries where the predictor and the exact SDF agree in sign
// (zero counts as positive on both sides).
double sign_accuracy(const FieldFunction& predictor, const ShapeInstance& shape, const PointCloud& cloud,
                     const SignAccuracyOptions& options);
double sign_accuracy(const ConditionalSdfModel& model, const ShapeInstance& shape, const PointCloud& cloud,
                     const SignAccuracyOptions& options);

// ---------------------------------------------------------------------------
// Noise robustness

struct NoiseConfig {
  std::vector<double> variances{0.0, 0.01, 0.05, 0.1, 0.15, 0.2};
  std::uint64_t seed = 0;
};

void validate(const NoiseConfig& config);
void to_json(nlohmann::json& j, const NoiseConfig& c);
void from_json(const nlohmann::json& j, NoiseConfig& c);

struct NoisePoint {
  double variance = 0.0;
  CdResult result;
};

// Adds iid Gaussian noise with the given variance to every point; a zero
// variance returns the cloud unchanged.
PointCloud add_gaussian_noise(const PointCloud& cloud, double variance, std::uint64_t seed);

std::vector<NoisePoint> noise_sweep(const ConditionalSdfModel& model, const ShapeInstance& shape,
                                    const PointCloud& base_cloud, const NoiseConfig& noise,
                                    const ReconstructionOptions& options);

// ---------------------------------------------------------------------------
// Ablations

// proposed: stage 1 then stage 2. only-meta: stage 1 alone. only-semi:
// stage 2 from scratch. sup-only: supervised on X without episodes or
// unlabeled data. gradient-pull: stage 1 with the gradient-pull estimator.
// Arms trained from scratch in a single stage get the proposed arm's total
// step count.
enum class Arm { proposed, only_meta, only_semi, sup_only, gradient_pull };

std::string_view to_string(Arm arm);
Arm parse_arm(std::string_view name);

struct AblationConfig {
  std::vector<Arm> arms{Arm::proposed, Arm::only_meta, Arm::only_semi, Arm::sup_only};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ModelConfig model;
  TrainConfig train;
  ReconstructionOptions reconstruction;
  SignAccuracyOptions sign;
  // Instances per category evaluated (0 = all). Seen shapes are training
  // instances of the labeled categories.
  std::size_t seen_per_category = 3;
  std::size_t unseen_per_category = 0;
  std::string revision = "unknown";
  // When set, each (arm, seed) trains into <dir>/<arm>/seed<k>.
  std::filesystem::path output_dir;
};

void to_json(nlohmann::json& j, const AblationConfig& c);
void from_json(const nlohmann::json& j, AblationConfig& c);

struct ShapeRecord {
  std::string arm;
  std::string category;
  std::string shape_id;
  std::uint64_t seed = 0;
  bool seen = false;
  double cd = 0.0;
  bool empty_mesh = false;
  double sign_acc = 0.0;
};

struct CategorySummary {
  std::string arm;
  std::string category;
  bool seen = false;
  double mean_cd = 0.0;
  double median_cd = 0.0;
  // Median over seeds of the per-seed mean CD.
  double seed_median_cd = 0.0;
  double mean_sign_acc = 0.0;
  std::size_t count = 0;
  std::size_t empty_meshes = 0;
};

struct ExperimentReport {
  std::vector<ShapeRecord> records;
  std::vector<CategorySummary> categories;
  std::vector<std::string> failed_arms;  // "arm/seed: message"
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::string revision;
  std::string cd_flavor = "squared";

  // Recomputes `categories` from `records`.
  void summarize();
  const CategorySummary* find(std::string_view arm, std::string_view category) const;
};

void to_json(nlohmann::json& j, const ExperimentReport& r);
// Columns: arm,category,shape_id,seed,seen,cd,empty_mesh,sign_acc.
void write_report_csv(const ExperimentReport& report, const std::filesystem::path& path);
void write_report_json(const ExperimentReport& report, const std::filesystem::path& path);

double median(std::vector<double> values);
double mean(const std::vector<double>& values);

// Evaluates one trained model on a dataset and appends a record per shape.
void evaluate_dataset(const ConditionalSdfModel& model, const LabeledDataset& dataset, bool seen,
                      std::size_t per_category, const std::string& arm, std::uint64_t seed,
                      const ReconstructionOptions& reconstruction, const SignAccuracyOptions& sign,
                      std::vector<ShapeRecord>& out);

// Trains every arm for every seed and evaluates on seen (training) and
// unseen (test) shapes. An arm that throws is listed in failed_arms; the
// others proceed.
ExperimentReport run_ablation(const LoadedDatasets& data, const AblationConfig& config);

// The trained model of one arm for one seed (in memory unless
// config.output_dir is set).
ConditionalSdfModel train_arm(Arm arm, const LoadedDatasets& data, const AblationConfig& config,
                              std::uint64_t seed);

}  // namespace gensdf
