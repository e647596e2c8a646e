#include "cli.hpp"

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "gensdf/dataset.hpp"
#include "gensdf/errors.hpp"
#include "gensdf/evaluation.hpp"
#include "gensdf/io.hpp"
#include "gensdf/reconstruction.hpp"
#include "gensdf/training.hpp"
#include "run_config.hpp"

namespace gensdf::cli {

namespace fs = std::filesystem;

namespace {

// Thrown for flag combinations CLI11 cannot express; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct CommonOptions {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int threads = 1;
  std::string log_level = "info";
};

void add_common(CLI::App& cmd, CommonOptions& o) {
  cmd.add_option("--config", o.config, "Run config JSON (sections: benchmark, model, train, ...)");
  o.seed_opt = cmd.add_option("--seed", o.seed, "Override every seed in the config");
  cmd.add_option("--threads", o.threads, "Worker threads (this build runs single-threaded)")->check(CLI::PositiveNumber);
  cmd.add_option("--log-level", o.log_level, "trace, debug, info, warn, error or off");
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed_opt && o.seed_opt->count()) apply_seed(c, o.seed);
  if (o.threads > 1) spdlog::warn("--threads {} requested; this build runs single-threaded", o.threads);
  return c;
}

void set_log_level(const std::string& name) {
  const auto level = spdlog::level::from_str(name);
  if (level == spdlog::level::off && name != "off") throw UsageError("unknown log level '" + name + "'");
  spdlog::set_level(level);
}

std::optional<fs::path> data_root_from_env() {
  if (const char* env = std::getenv("GENSDF_DATA_DIR"); env && *env) return fs::path(env);
  return std::nullopt;
}

fs::path resolve_manifest_path(const std::string& flag) {
  fs::path p;
  if (!flag.empty()) {
    p = flag;
  } else if (auto env = data_root_from_env()) {
    p = *env;
  } else {
    throw UsageError("no dataset given: pass --data or set GENSDF_DATA_DIR");
  }
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw UsageError("dataset manifest '" + p.string() + "' does not exist");
  return p;
}

LoadedDatasets load_data(const fs::path& manifest_path) {
  return load_datasets(load_manifest(manifest_path), manifest_path.parent_path());
}

template <class Dataset>
nlohmann::json category_counts(const Dataset& data) {
  std::map<std::string, std::size_t> counts;
  for (const auto& item : data.items()) {
    if constexpr (std::is_same_v<Dataset, UnlabeledDataset>)
      ++counts[item.category];
    else
      ++counts[item.shape.category_id];
  }
  return counts;
}

std::string format_cd(double cd) {
  if (!std::isfinite(cd)) return "inf";
  std::ostringstream os;
  os << std::scientific << std::setprecision(4) << cd;
  return os.str();
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  CommonOptions common;
  std::string out;
  std::vector<std::string> labeled, unlabeled, test;
  std::size_t labeled_count = 0, unlabeled_count = 0, test_count = 0, cloud_size = 0;
};

std::vector<ShapeFamily> parse_families(const std::vector<std::string>& names) {
  std::vector<ShapeFamily> out;
  for (const auto& n : names) out.push_back(parse_shape_family(n));
  return out;
}

int cmd_gen_data(const GenDataOptions& o) {
  RunConfig cfg = resolve_config(o.common);
  DeskBenchmarkConfig& b = cfg.benchmark;
  if (!o.labeled.empty()) b.labeled_families = parse_families(o.labeled);
  if (!o.unlabeled.empty()) b.unlabeled_families = parse_families(o.unlabeled);
  if (!o.test.empty()) b.test_families = parse_families(o.test);
  if (o.labeled_count) b.labeled_per_family = o.labeled_count;
  if (o.unlabeled_count) b.unlabeled_per_family = o.unlabeled_count;
  if (o.test_count) b.test_per_family = o.test_count;
  if (o.cloud_size) b.cloud_size = o.cloud_size;

  fs::path out;
  if (!o.out.empty())
    out = o.out;
  else if (auto env = data_root_from_env())
    out = *env;
  else
    throw UsageError("no output directory: pass --out or set GENSDF_DATA_DIR");

  RunLock lock(out);
  const ShapeManifest manifest = make_desk_manifest(b);
  check_split_disjointness(manifest);
  write_dataset(manifest, out);

  RunManifest run("gen-data", cfg);
  run.set_data_manifest(out / "manifest.json");
  run.add_artifact("manifest", out / "manifest.json");
  run.set("seeds", {{"benchmark", b.seed}});
  run.write(out / "run_manifest.json");
  std::cout << "wrote " << manifest.entries.size() << " shapes to " << out.string() << " (manifest checksum "
            << file_checksum(out / "manifest.json") << ")\n";
  return kSuccess;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  CommonOptions common;
  int stage = 1;
  std::string data, out, init, resume;
  bool from_scratch = false;
  bool dry_run = false;
  std::size_t epochs = 0;
};

int cmd_train(const TrainOptions& o) {
  if (o.stage == 2 && o.init.empty() && !o.from_scratch && o.resume.empty())
    throw UsageError("stage 2 needs --init CHECKPOINT (or --from-scratch for the only-semi arm)");
  if (o.stage == 1 && (!o.init.empty() || o.from_scratch))
    throw UsageError("--init and --from-scratch only apply to stage 2");
  if (!o.init.empty() && o.from_scratch) throw UsageError("--init and --from-scratch are mutually exclusive");
  if (!o.resume.empty() && (!o.init.empty() || o.from_scratch))
    throw UsageError("--resume cannot be combined with --init or --from-scratch");

  RunConfig cfg = resolve_config(o.common);
  if (o.epochs) (o.stage == 1 ? cfg.train.stage1_epochs : cfg.train.stage2_epochs) = o.epochs;
  validate(cfg.train);
  const fs::path manifest_path = resolve_manifest_path(o.data);
  const LoadedDatasets data = load_data(manifest_path);
  if (o.stage == 2) check_disjoint(data.labeled, data.unlabeled);

  if (o.dry_run) {
    const std::size_t steps = o.stage == 1 ? (data.labeled.size() + 1) / 2 : data.labeled.size();
    nlohmann::json j{{"config", to_json(cfg)},
                     {"stage", o.stage},
                     {"data_manifest", manifest_path.string()},
                     {"dataset",
                      {{"labeled", category_counts(data.labeled)},
                       {"unlabeled", category_counts(data.unlabeled)},
                       {"test", category_counts(data.test)}}},
                     {"steps_per_epoch", steps},
                     {"epochs", o.stage == 1 ? cfg.train.stage1_epochs : cfg.train.stage2_epochs}};
    std::cout << j.dump(2) << '\n';
    return kSuccess;
  }
  if (o.out.empty()) throw UsageError("train needs --out DIR");

  const fs::path out = o.out;
  RunLock lock(out);
  cfg.train.output_dir = out;
  StageResult result = [&] {
    if (!o.resume.empty()) {
      std::optional<std::size_t> total;
      if (o.epochs) total = o.epochs;
      return resume_training(o.resume, data.labeled, data.unlabeled, cfg.train, total);
    }
    if (o.stage == 1) return train_stage1(ConditionalSdfModel(cfg.model), data.labeled, cfg.train);
    ConditionalSdfModel model = o.from_scratch ? ConditionalSdfModel(cfg.model) : load_checkpoint(o.init);
    return train_stage2(std::move(model), data.labeled, data.unlabeled, cfg.train);
  }();

  const fs::path model_path = out / "model.ckpt";
  save_checkpoint(result.state.model, model_path);

  RunManifest run("train", cfg);
  run.set_data_manifest(manifest_path);
  run.add_artifact("config", out / "config.json");
  run.add_artifact("metrics", out / ("metrics_stage" + std::to_string(result.state.stage) + ".csv"));
  run.add_artifact("model", model_path);
  if (!result.last_checkpoint.empty()) run.add_artifact("last_checkpoint", result.last_checkpoint);
  if (!o.init.empty()) run.add_artifact("init_checkpoint", o.init);
  run.set("stage", result.state.stage);
  run.set("model", result.state.model.config());
  run.set("seeds", {{"train", cfg.train.seed}, {"schedule", cfg.train.schedule.seed}, {"init", cfg.model.init_seed}});
  run.set("epoch_mean_total", result.epoch_mean_total);
  run.write(out / "run_manifest.json");

  std::cout << "stage " << result.state.stage << ": " << result.state.epochs_done << " epochs, "
            << result.state.global_step << " steps";
  if (!result.epoch_mean_total.empty())
    std::cout << ", epoch-mean total " << result.epoch_mean_total.front() << " -> " << result.epoch_mean_total.back();
  std::cout << "\nmodel written to " << model_path.string() << '\n';
  return kSuccess;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconstructOptions {
  CommonOptions common;
  std::string checkpoint, cloud, out, grid_out;
  std::size_t resolution = 0;
  std::size_t refine_iters = 0;
  bool normalize = false;
};

int cmd_reconstruct(const ReconstructOptions& o) {
  RunConfig cfg = resolve_config(o.common);
  if (o.resolution) cfg.reconstruction.resolution = o.resolution;
  if (!fs::exists(o.checkpoint)) throw LoadError("checkpoint '" + o.checkpoint + "' does not exist");
  ConditionalSdfModel model = load_checkpoint(o.checkpoint);
  PointCloud cloud = load_point_cloud(o.cloud);

  std::optional<NormalizationTransform> transform;
  if (o.normalize) {
    transform = fit_normalization(cloud);
    cloud = apply_normalization(cloud, *transform);
  }
  if (o.refine_iters > 0) {
    RefineConfig rc = cfg.refine;
    rc.iterations = o.refine_iters;
    RefineResult refined = refine(model, cloud, rc);
    if (refined.diverged) spdlog::warn("refinement diverged; using the last finite model");
    model = std::move(refined.model);
  }
  const GridField grid = evaluate_grid(model, cloud, cfg.reconstruction.resolution, cfg.reconstruction.lo,
                                       cfg.reconstruction.hi);
  TriangleMesh mesh = marching_cubes(grid);
  if (transform)
    for (Point3& v : mesh.vertices) v = transform->invert(v);
  if (mesh.empty()) spdlog::warn("the predicted field has no zero crossing; writing an empty mesh");

  const fs::path out = o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_obj(mesh, out);
  RunManifest run("reconstruct", cfg);
  run.add_artifact("checkpoint", o.checkpoint);
  run.add_artifact("cloud", o.cloud);
  run.add_artifact("mesh", out);
  if (!o.grid_out.empty()) {
    write_grid(grid, o.grid_out);
    run.add_artifact("grid", o.grid_out);
  }
  run.set("refine_iters", o.refine_iters);
  run.set("normalize", o.normalize);
  run.set("seeds", {{"refine", cfg.refine.seed}});
  fs::path manifest_path = out;
  manifest_path += ".run.json";
  run.write(manifest_path);
  std::cout << "wrote " << out.string() << " (" << mesh.vertices.size() << " vertices, " << mesh.triangles.size()
            << " triangles)\n";
  return kSuccess;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  CommonOptions common;
  std::string checkpoint, data, out, mode;
  std::size_t resolution = 0;
};

void print_summary(const ExperimentReport& report) {
  for (const auto& c : report.categories)
    std::cout << std::left << std::setw(14) << c.arm << std::setw(18) << c.category << (c.seen ? "seen   " : "unseen ")
              << "mean CD " << format_cd(c.mean_cd) << "  median CD " << format_cd(c.median_cd) << "  sign acc "
              << std::fixed << std::setprecision(4) << c.mean_sign_acc << std::defaultfloat << "  n=" << c.count
              << '\n';
  for (const auto& f : report.failed_arms) std::cout << "FAILED " << f << '\n';
}

int cmd_eval(const EvalOptions& o) {
  RunConfig cfg = resolve_config(o.common);
  if (o.resolution) cfg.reconstruction.resolution = o.resolution;
  if (o.mode != "ablation" && o.checkpoint.empty()) throw UsageError("eval --mode " + o.mode + " needs --checkpoint");
  if (!o.checkpoint.empty() && !fs::exists(o.checkpoint))
    throw LoadError("checkpoint '" + o.checkpoint + "' does not exist");
  const fs::path manifest_path = resolve_manifest_path(o.data);
  const fs::path out = o.out;
  RunLock lock(out);
  const LoadedDatasets data = load_data(manifest_path);

  RunManifest run("eval", cfg);
  run.set_data_manifest(manifest_path);
  run.set("mode", o.mode);
  if (!o.checkpoint.empty()) run.add_artifact("checkpoint", o.checkpoint);
  int code = kSuccess;

  if (o.mode == "seen" || o.mode == "unseen") {
    const ConditionalSdfModel model = load_checkpoint(o.checkpoint);
    const bool seen = o.mode == "seen";
    ExperimentReport report;
    report.seeds = {cfg.train.seed};
    report.revision = revision();
    report.config_hash = run.config_hash();
    report.cd_flavor = std::string(to_string(cfg.reconstruction.chamfer.flavor));
    evaluate_dataset(model, seen ? data.labeled : data.test, seen,
                     seen ? cfg.seen_per_category : cfg.unseen_per_category, "model", cfg.train.seed,
                     cfg.reconstruction, cfg.sign, report.records);
    report.summarize();
    write_report_json(report, out / "report.json");
    write_report_csv(report, out / "report.csv");
    run.add_artifact("report_json", out / "report.json");
    run.add_artifact("report_csv", out / "report.csv");
    print_summary(report);
  } else if (o.mode == "noise") {
    const ConditionalSdfModel model = load_checkpoint(o.checkpoint);
    std::map<std::string, std::size_t> taken;
    std::vector<std::vector<double>> cds(cfg.noise.variances.size());
    std::vector<std::size_t> empties(cfg.noise.variances.size(), 0);
    nlohmann::json shapes = nlohmann::json::array();
    std::ofstream per_shape(out / "noise_shapes.csv");
    per_shape << "shape_id,category,variance,cd,empty_mesh\n" << std::setprecision(17);
    for (const LabeledItem& item : data.test.items()) {
      if (cfg.unseen_per_category && taken[item.shape.category_id]++ >= cfg.unseen_per_category) continue;
      const auto sweep = noise_sweep(model, item.shape, item.cloud, cfg.noise, cfg.reconstruction);
      for (std::size_t i = 0; i < sweep.size(); ++i) {
        cds[i].push_back(sweep[i].result.cd);
        empties[i] += sweep[i].result.empty_mesh;
        per_shape << item.id << ',' << item.shape.category_id << ',' << sweep[i].variance << ','
                  << sweep[i].result.cd << ',' << (sweep[i].result.empty_mesh ? 1 : 0) << '\n';
      }
    }
    if (cds.front().empty()) throw EvaluationError("noise sweep: the test split is empty");
    std::ofstream csv(out / "noise.csv");
    csv << "variance,mean_cd,median_cd,shapes,empty_meshes\n" << std::setprecision(17);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < cds.size(); ++i) {
      const double m = mean(cds[i]), med = median(cds[i]);
      csv << cfg.noise.variances[i] << ',' << m << ',' << med << ',' << cds[i].size() << ',' << empties[i] << '\n';
      rows.push_back({{"variance", cfg.noise.variances[i]},
                      {"mean_cd", std::isfinite(m) ? nlohmann::json(m) : nlohmann::json(nullptr)},
                      {"median_cd", std::isfinite(med) ? nlohmann::json(med) : nlohmann::json(nullptr)},
                      {"shapes", cds[i].size()},
                      {"empty_meshes", empties[i]}});
      std::cout << "sigma^2 " << cfg.noise.variances[i] << "  mean CD " << format_cd(m) << "  median CD "
                << format_cd(med) << '\n';
    }
    csv.close();
    per_shape.close();
    std::ofstream(out / "report.json") << nlohmann::json{{"mode", "noise"},
                                                         {"rows", rows},
                                                         {"config_hash", run.config_hash()},
                                                         {"revision", revision()},
                                                         {"cd_flavor", to_string(cfg.reconstruction.chamfer.flavor)}}
                                              .dump(2)
                                       << '\n';
    run.add_artifact("noise_csv", out / "noise.csv");
    run.add_artifact("noise_shapes_csv", out / "noise_shapes.csv");
    run.add_artifact("report_json", out / "report.json");
  } else if (o.mode == "ablation") {
    AblationConfig acfg = ablation_config(cfg);
    acfg.output_dir = out / "arms";
    const ExperimentReport report = run_ablation(data, acfg);
    write_report_json(report, out / "report.json");
    write_report_csv(report, out / "report.csv");
    run.add_artifact("report_json", out / "report.json");
    run.add_artifact("report_csv", out / "report.csv");
    print_summary(report);
    if (report.failed_arms.size() == acfg.arms.size() * acfg.seeds.size()) code = kRuntimeFailure;
  } else {
    throw UsageError("unknown eval mode '" + o.mode + "'");
  }
  run.write(out / "run_manifest.json");
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Semi-supervised conditional SDF toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gensdf " + revision());

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic benchmark (clouds + manifest)");
  add_common(*gen_cmd, gen.common);
  gen_cmd->add_option("--out", gen.out, "Dataset directory (default: $GENSDF_DATA_DIR)");
  gen_cmd->add_option("--labeled", gen.labeled, "Labeled families")->delimiter(',');
  gen_cmd->add_option("--unlabeled", gen.unlabeled, "Unlabeled families")->delimiter(',');
  gen_cmd->add_option("--test", gen.test, "Test families")->delimiter(',');
  gen_cmd->add_option("--labeled-count", gen.labeled_count, "Instances per labeled family");
  gen_cmd->add_option("--unlabeled-count", gen.unlabeled_count, "Instances per unlabeled family");
  gen_cmd->add_option("--test-count", gen.test_count, "Instances per test family");
  gen_cmd->add_option("--cloud-size", gen.cloud_size, "Points per cloud");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Run training stage 1 or 2");
  add_common(*train_cmd, train.common);
  train_cmd->add_option("--stage", train.stage, "1 (episodic) or 2 (semi-supervised)")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  train_cmd->add_option("--data", train.data, "Dataset manifest or directory (default: $GENSDF_DATA_DIR)");
  train_cmd->add_option("--out", train.out, "Run directory");
  train_cmd->add_option("--init", train.init, "Stage-1 checkpoint to start stage 2 from");
  train_cmd->add_flag("--from-scratch", train.from_scratch, "Stage 2 from a fresh model");
  train_cmd->add_option("--resume", train.resume, "Continue from a training checkpoint");
  train_cmd->add_option("--epochs", train.epochs, "Override the stage's epoch count");
  train_cmd->add_flag("--dry-run", train.dry_run, "Print the resolved config and dataset statistics");

  ReconstructOptions rec;
  auto* rec_cmd = app.add_subcommand("reconstruct", "Reconstruct a mesh from a point cloud");
  add_common(*rec_cmd, rec.common);
  rec_cmd->add_option("--checkpoint", rec.checkpoint, "Model checkpoint")->required();
  rec_cmd->add_option("--cloud", rec.cloud, "Point cloud (.xyz or .pcb)")->required();
  rec_cmd->add_option("--out", rec.out, "Output OBJ")->required();
  rec_cmd->add_option("--resolution", rec.resolution, "Grid nodes per axis")->check(CLI::Range(8, 1024));
  rec_cmd->add_option("--refine-iters", rec.refine_iters, "Test-time refinement iterations (0 = zero-shot)");
  rec_cmd->add_flag("--normalize", rec.normalize, "Recenter and rescale the cloud before inference");
  rec_cmd->add_option("--grid-out", rec.grid_out, "Also dump the evaluated grid");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model or run the ablation study");
  add_common(*eval_cmd, ev.common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint (not needed for ablation)");
  eval_cmd->add_option("--data", ev.data, "Dataset manifest or directory (default: $GENSDF_DATA_DIR)");
  eval_cmd->add_option("--out", ev.out, "Report directory")->required();
  eval_cmd->add_option("--mode", ev.mode, "seen, unseen, noise or ablation")
      ->required()
      ->check(CLI::IsMember({"seen", "unseen", "noise", "ablation"}));
  eval_cmd->add_option("--resolution", ev.resolution, "Grid nodes per axis")->check(CLI::Range(8, 1024));

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    if (*gen_cmd) {
      set_log_level(gen.common.log_level);
      return cmd_gen_data(gen);
    }
    if (*train_cmd) {
      set_log_level(train.common.log_level);
      return cmd_train(train);
    }
    if (*rec_cmd) {
      set_log_level(rec.common.log_level);
      return cmd_reconstruct(rec);
    }
    set_log_level(ev.common.log_level);
    return cmd_eval(ev);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ArgumentError& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kUsageError;
  } catch (const LoadError& e) {
    std::cerr << "cannot load input: " << e.what() << '\n';
    return kUsageError;
  } catch (const DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
}

}  // namespace gensdf::cli
