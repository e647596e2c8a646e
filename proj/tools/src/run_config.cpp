#include "run_config.hpp"

#include <cstdio>
#include <fstream>

#include <unistd.h>

#include "gensdf/errors.hpp"
#include "gensdf/io.hpp"

#ifndef GENSDF_REVISION
#define GENSDF_REVISION "unknown"
#endif

namespace gensdf::cli {

namespace fs = std::filesystem;

nlohmann::json to_json(const RunConfig& c) {
  std::vector<std::string> arms;
  for (Arm a : c.arms) arms.emplace_back(to_string(a));
  return nlohmann::json{{"benchmark", c.benchmark},
                        {"model", c.model},
                        {"train", c.train},
                        {"reconstruction", c.reconstruction},
                        {"refine", c.refine},
                        {"noise", c.noise},
                        {"evaluation",
                         {{"seen_per_category", c.seen_per_category},
                          {"unseen_per_category", c.unseen_per_category},
                          {"sign",
                           {{"queries", c.sign.queries},
                            {"near_fraction", c.sign.near_fraction},
                            {"sigma_near", c.sign.sigma_near},
                            {"band", c.sign.band},
                            {"seed", c.sign.seed}}}}},
                        {"ablation", {{"arms", arms}, {"seeds", c.ablation_seeds}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    for (const auto& [key, value] : j.items())
      if (key != "benchmark" && key != "model" && key != "train" && key != "reconstruction" && key != "refine" &&
          key != "noise" && key != "evaluation" && key != "ablation")
        throw ConfigError("unknown run config section '" + key + "'");
    if (j.contains("benchmark")) c.benchmark = j.at("benchmark").get<DeskBenchmarkConfig>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("reconstruction")) c.reconstruction = j.at("reconstruction").get<ReconstructionOptions>();
    if (j.contains("refine")) c.refine = j.at("refine").get<RefineConfig>();
    if (j.contains("noise")) c.noise = j.at("noise").get<NoiseConfig>();
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      c.seen_per_category = e.value("seen_per_category", c.seen_per_category);
      c.unseen_per_category = e.value("unseen_per_category", c.unseen_per_category);
      if (e.contains("sign")) {
        const auto& s = e.at("sign");
        c.sign.queries = s.value("queries", c.sign.queries);
        c.sign.near_fraction = s.value("near_fraction", c.sign.near_fraction);
        c.sign.sigma_near = s.value("sigma_near", c.sign.sigma_near);
        c.sign.band = s.value("band", c.sign.band);
        c.sign.seed = s.value("seed", c.sign.seed);
      }
    }
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      if (a.contains("arms")) {
        c.arms.clear();
        for (const auto& name : a.at("arms")) c.arms.push_back(parse_arm(name.get<std::string>()));
      }
      if (a.contains("seeds")) c.ablation_seeds = a.at("seeds").get<std::vector<std::uint64_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.benchmark.seed = seed;
  c.model.init_seed = seed;
  c.train.seed = seed;
  c.train.schedule.seed = seed;
  c.refine.seed = seed;
  c.noise.seed = seed;
  c.sign.seed = seed;
  c.reconstruction.chamfer.seed = seed;
}

AblationConfig ablation_config(const RunConfig& c) {
  AblationConfig a;
  a.arms = c.arms;
  a.seeds = c.ablation_seeds;
  a.model = c.model;
  a.train = c.train;
  a.reconstruction = c.reconstruction;
  a.sign = c.sign;
  a.seen_per_category = c.seen_per_category;
  a.unseen_per_category = c.unseen_per_category;
  a.revision = revision();
  return a;
}

RunManifest::RunManifest(std::string command, const RunConfig& config)
    : command_(std::move(command)),
      config_(to_json(config)),
      config_hash_(hash_string(config_.dump())),
      start_(std::chrono::steady_clock::now()) {}

void RunManifest::set_data_manifest(const fs::path& path) {
  extra_["data_manifest"] = fs::absolute(path).string();
  extra_["data_checksum"] = file_checksum(path);
}

void RunManifest::add_artifact(const std::string& role, const fs::path& path) { artifacts_.emplace_back(role, path); }

void RunManifest::set(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }

void RunManifest::write(const fs::path& path) const {
  nlohmann::json artifacts = nlohmann::json::object();
  for (const auto& [role, p] : artifacts_) {
    if (!fs::exists(p)) throw Error("run artifact '" + role + "' is missing: " + p.string());
    artifacts[role] = fs::absolute(p).string();
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  nlohmann::json j{{"command", command_},   {"config", config_},     {"config_hash", config_hash_},
                   {"artifacts", artifacts}, {"wall_seconds", wall}, {"revision", revision()}};
  for (const auto& [k, v] : extra_.items()) j[k] = v;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write run manifest '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f)
    throw Error("run directory '" + dir.string() + "' is locked by another process (remove " + path_.string() +
                " if it is stale)");
  std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string revision() { return GENSDF_REVISION; }

}  // namespace gensdf::cli
