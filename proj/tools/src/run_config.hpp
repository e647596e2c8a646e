#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/dataset.hpp"
#include "gensdf/evaluation.hpp"
#include "gensdf/model.hpp"
#include "gensdf/training.hpp"

namespace gensdf::cli {

// Everything a command can be configured with. Sections missing from the
// JSON file keep their library defaults.
struct RunConfig {
  DeskBenchmarkConfig benchmark;
  ModelConfig model;
  TrainConfig train;
  ReconstructionOptions reconstruction;
  RefineConfig refine;
  NoiseConfig noise;
  SignAccuracyOptions sign;
  std::size_t seen_per_category = 3;
  std::size_t unseen_per_category = 0;
  std::vector<Arm> arms{Arm::proposed, Arm::only_meta, Arm::only_semi, Arm::sup_only};
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// Pins every seed in the config to `seed`.
void apply_seed(RunConfig& c, std::uint64_t seed);
AblationConfig ablation_config(const RunConfig& c);

// Written as run_manifest.json next to a command's outputs.
class RunManifest {
 public:
  RunManifest(std::string command, const RunConfig& config);

  void set_data_manifest(const std::filesystem::path& path);
  void add_artifact(const std::string& role, const std::filesystem::path& path);
  void set(const std::string& key, nlohmann::json value);
  // Throws Error if a listed artifact is missing.
  void write(const std::filesystem::path& path) const;

  const std::string& config_hash() const { return config_hash_; }

 private:
  std::string command_;
  nlohmann::json config_;
  std::string config_hash_;
  nlohmann::json extra_ = nlohmann::json::object();
  std::vector<std::pair<std::string, std::filesystem::path>> artifacts_;
  std::chrono::steady_clock::time_point start_;
};

// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Build revision baked in at configure time ("unknown" outside git).
std::string revision();

}  // namespace gensdf::cli
