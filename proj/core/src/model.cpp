#include "gensdf/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <spdlog/spdlog.h>

#include "gensdf/errors.hpp"
#include "gensdf/random.hpp"

namespace gensdf {

namespace {

constexpr std::size_t kPredictChunk = 4096;
constexpr char kMagic[4] = {'G', 'S', 'D', 'F'};

bool outside_unit_cube(const Point3& p) {
  return std::abs(p.x) > 1.0 || std::abs(p.y) > 1.0 || std::abs(p.z) > 1.0;
}

void log_clamped(std::span<const Point3> xs) {
  if (!spdlog::should_log(spdlog::level::debug)) return;
  const auto n = std::count_if(xs.begin(), xs.end(), outside_unit_cube);
  if (n > 0) spdlog::debug("{} query point(s) outside [-1,1]^3 clamped to the boundary cell", n);
}

}  // namespace

std::string_view to_string(EncoderVariant v) {
  return v == EncoderVariant::global_latent ? "global-latent" : "grid-local";
}

EncoderVariant parse_encoder_variant(std::string_view name) {
  if (name == "global-latent") return EncoderVariant::global_latent;
  if (name == "grid-local") return EncoderVariant::grid_local;
  throw ConfigError("unknown encoder variant '" + std::string(name) + "' (expected global-latent or grid-local)");
}

void validate(const ModelConfig& config) {
  const auto& e = config.encoder;
  if (e.widths.empty()) throw ConfigError("encoder widths must be nonempty");
  for (std::size_t w : e.widths)
    if (w == 0) throw ConfigError("encoder widths must be positive");
  if (e.latent_dim == 0) throw ConfigError("latent dimension must be positive");
  if (e.variant == EncoderVariant::grid_local && e.grid_resolution < 4)
    throw ConfigError("grid resolution must be at least 4, got " + std::to_string(e.grid_resolution));
  if (config.decoder.hidden.empty()) throw ConfigError("decoder needs at least one hidden layer");
  for (std::size_t w : config.decoder.hidden)
    if (w == 0) throw ConfigError("decoder widths must be positive");
  if (!(config.decoder.query_init_gain >= 0.0) || !std::isfinite(config.decoder.query_init_gain))
    throw ConfigError("query_init_gain must be finite and non-negative");
}

void to_json(nlohmann::json& j, const ModelConfig& config) {
  j = nlohmann::json{{"encoder",
                      {{"variant", std::string(to_string(config.encoder.variant))},
                       {"widths", config.encoder.widths},
                       {"latent_dim", config.encoder.latent_dim},
                       {"grid_resolution", config.encoder.grid_resolution}}},
                     {"decoder", {{"hidden", config.decoder.hidden}, {"query_init_gain", config.decoder.query_init_gain}}},
                     {"init_seed", config.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& config) {
  try {
    config = ModelConfig{};
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      config.encoder.variant = parse_encoder_variant(e.value("variant", std::string("grid-local")));
      config.encoder.widths = e.value("widths", config.encoder.widths);
      config.encoder.latent_dim = e.value("latent_dim", config.encoder.latent_dim);
      config.encoder.grid_resolution = e.value("grid_resolution", config.encoder.grid_resolution);
    }
    if (j.contains("decoder")) {
      const auto& dj = j.at("decoder");
      config.decoder.hidden = dj.value("hidden", config.decoder.hidden);
      config.decoder.query_init_gain = dj.value("query_init_gain", config.decoder.query_init_gain);
    }
    config.init_seed = j.value("init_seed", config.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  validate(config);
}

ad::Tensor points_to_tensor(std::span<const Point3> points) {
  if (points.empty()) throw ArgumentError("empty point set");
  ad::Tensor t({points.size(), 3});
  for (std::size_t i = 0; i < points.size(); ++i) {
    t[3 * i] = points[i].x;
    t[3 * i + 1] = points[i].y;
    t[3 * i + 2] = points[i].z;
  }
  return t;
}

std::vector<double> query_feature(const LatentFeatures& features, const Point3& x) {
  if (!is_finite(x)) throw ArgumentError("query point must be finite");
  if (features.variant == EncoderVariant::global_latent) return features.global.storage();
  if (outside_unit_cube(x)) spdlog::debug("query ({}, {}, {}) outside [-1,1]^3 clamped", x.x, x.y, x.z);
  ad::Graph g;
  const ad::Var grid = g.constant(features.grid);
  const ad::Var pos = g.constant(points_to_tensor(std::span<const Point3>(&x, 1)));
  std::vector<double> out = ad::grid_gather_trilinear(grid, pos, features.grid_spec).value().storage();
  out.insert(out.end(), features.global.storage().begin(), features.global.storage().end());
  return out;
}

// ---------------------------------------------------------------------------
// Model

ConditionalSdfModel::ConditionalSdfModel(ModelConfig config) : config_(std::move(config)) {
  validate(config_);
  const double relu_gain = std::sqrt(2.0);
  std::uint64_t layer = 0;

  encoder_.first = params_.size();
  std::size_t in = 3;
  for (std::size_t w : config_.encoder.widths) {
    add_linear("encoder." + std::to_string(layer), in, w, relu_gain, derive_seed(config_.init_seed, {layer}));
    in = w;
    ++layer;
  }
  add_linear("encoder." + std::to_string(layer), in, config_.encoder.latent_dim, 1.0,
             derive_seed(config_.init_seed, {layer}));
  ++layer;
  encoder_.count = config_.encoder.widths.size() + 1;

  decoder_.first = params_.size();
  in = 3 + feature_dim();
  std::size_t d = 0;
  for (std::size_t w : config_.decoder.hidden) {
    add_linear("decoder." + std::to_string(d++), in, w, relu_gain, derive_seed(config_.init_seed, {layer++}));
    if (d == 1 && config_.decoder.query_init_gain > 0.0) {
      const double f = std::sqrt(static_cast<double>(in) / 3.0) * config_.decoder.query_init_gain;
      auto& wt = params_[params_.size() - 2].storage();
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < w; ++c) wt[r * w + c] *= f;
    }
    in = w;
  }
  add_linear("decoder." + std::to_string(d), in, 1, 1.0, derive_seed(config_.init_seed, {layer}));
  decoder_.count = config_.decoder.hidden.size() + 1;
}

void ConditionalSdfModel::add_linear(const std::string& name, std::size_t in, std::size_t out, double gain,
                                     std::uint64_t seed) {
  // Fan-in uniform init: Var(w) = gain^2 / fan_in.
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(in));
  Rng rng(seed);
  ad::Tensor w({in, out});
  for (double& v : w.storage()) v = rng.uniform(-bound, bound);
  params_.push_back(std::move(w));
  names_.push_back(name + ".weight");
  params_.emplace_back(std::vector<std::size_t>{1, out});
  names_.push_back(name + ".bias");
}

std::size_t ConditionalSdfModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::size_t ConditionalSdfModel::feature_dim() const {
  const std::size_t l = config_.encoder.latent_dim;
  return config_.encoder.variant == EncoderVariant::grid_local ? 2 * l : l;
}

ModelVars ConditionalSdfModel::bind(ad::Graph& g, bool trainable) const {
  ModelVars vars;
  vars.params.reserve(params_.size());
  for (const auto& p : params_) vars.params.push_back(trainable ? g.variable(p) : g.constant(p));
  return vars;
}

ad::Var ConditionalSdfModel::run_mlp(ad::Graph&, const ModelVars& vars, LayerRange layers, ad::Var x) const {
  for (std::size_t l = 0; l < layers.count; ++l) {
    const std::size_t w = layers.first + 2 * l;
    x = ad::add(ad::matmul(x, vars.params[w]), vars.params[w + 1]);
    if (l + 1 < layers.count) x = ad::relu(x);
  }
  return x;
}

EncodedVars ConditionalSdfModel::encode(ad::Graph& g, const ModelVars& vars, const PointCloud& cloud) const {
  // A canonical point order makes every reduction below, including the
  // floating-point sums of the grid splat, independent of input order.
  std::vector<Point3> pts(cloud.begin(), cloud.end());
  std::sort(pts.begin(), pts.end(), [](const Point3& a, const Point3& b) {
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.z < b.z;
  });
  const ad::Tensor positions = points_to_tensor(pts);
  const ad::Var feats = run_mlp(g, vars, encoder_, g.constant(positions));
  EncodedVars enc;
  enc.global = ad::max_pool_over_points(feats);
  if (config_.encoder.variant == EncoderVariant::grid_local) {
    const ad::GridSpec spec{config_.encoder.grid_resolution, -1.0, 1.0};
    enc.grid = ad::grid_scatter_mean(feats, positions, spec);
  }
  return enc;
}

ad::Var ConditionalSdfModel::decoder_input(ad::Graph&, const EncodedVars& enc, ad::Var queries) const {
  const std::size_t k = queries.rows();
  const ad::Var global = ad::broadcast_rows(enc.global, k);
  if (config_.encoder.variant == EncoderVariant::global_latent) return ad::concat({queries, global});
  const ad::GridSpec spec{config_.encoder.grid_resolution, -1.0, 1.0};
  return ad::concat({queries, ad::grid_gather_trilinear(enc.grid, queries, spec), global});
}

ad::Var ConditionalSdfModel::predict(ad::Graph& g, const ModelVars& vars, const EncodedVars& enc,
                                     ad::Var queries) const {
  if (queries.value().rank() != 2 || queries.cols() != 3)
    throw ArgumentError("queries must be a [K, 3] tensor, got " + ad::shape_string(queries.shape()));
  return run_mlp(g, vars, decoder_, decoder_input(g, enc, queries));
}

LatentFeatures ConditionalSdfModel::encode(const PointCloud& cloud) const {
  ad::Graph g;
  const ModelVars vars = bind(g, false);
  const EncodedVars enc = encode(g, vars, cloud);
  LatentFeatures out;
  out.variant = config_.encoder.variant;
  out.global = enc.global.value();
  if (enc.grid.valid()) out.grid = enc.grid.value();
  out.grid_spec = ad::GridSpec{config_.encoder.grid_resolution, -1.0, 1.0};
  return out;
}

namespace {

EncodedVars bind_features(ad::Graph& g, const LatentFeatures& features) {
  EncodedVars enc;
  enc.global = g.constant(features.global);
  if (features.variant == EncoderVariant::grid_local) enc.grid = g.constant(features.grid);
  return enc;
}

void check_features(const ModelConfig& config, const LatentFeatures& features) {
  const std::size_t l = config.encoder.latent_dim;
  bool ok = features.variant == config.encoder.variant && features.global.numel() == l;
  if (ok && features.variant == EncoderVariant::grid_local) {
    const std::size_t g = config.encoder.grid_resolution;
    ok = features.grid.rank() == 2 && features.grid.rows() == g * g * g && features.grid.cols() == l;
  }
  if (!ok) throw ArgumentError("latent features were not produced by this model's encoder");
}

}  // namespace

std::vector<double> ConditionalSdfModel::predict_batch(std::span<const Point3> xs,
                                                       const LatentFeatures& features) const {
  check_features(config_, features);
  for (const Point3& x : xs)
    if (!is_finite(x)) throw ArgumentError("query point must be finite");
  log_clamped(xs);
  std::vector<double> out;
  out.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += kPredictChunk) {
    const auto chunk = xs.subspan(begin, std::min(kPredictChunk, xs.size() - begin));
    ad::Graph g;
    const ModelVars vars = bind(g, false);
    const EncodedVars enc = bind_features(g, features);
    const ad::Var s = predict(g, vars, enc, g.constant(points_to_tensor(chunk)));
    out.insert(out.end(), s.value().storage().begin(), s.value().storage().end());
  }
  return out;
}

double ConditionalSdfModel::predict(const Point3& x, const LatentFeatures& features) const {
  return predict_batch(std::span<const Point3>(&x, 1), features)[0];
}

std::vector<Point3> ConditionalSdfModel::input_gradients(std::span<const Point3> xs,
                                                         const LatentFeatures& features) const {
  check_features(config_, features);
  for (const Point3& x : xs)
    if (!is_finite(x)) throw ArgumentError("query point must be finite");
  std::vector<Point3> out;
  out.reserve(xs.size());
  for (std::size_t begin = 0; begin < xs.size(); begin += kPredictChunk) {
    const auto chunk = xs.subspan(begin, std::min(kPredictChunk, xs.size() - begin));
    ad::Graph g;
    const ModelVars vars = bind(g, false);
    const EncodedVars enc = bind_features(g, features);
    const ad::Var q = g.variable(points_to_tensor(chunk));
    // Rows are independent, so the gradient of the sum is the per-row gradient.
    g.backward(ad::reduce_sum(predict(g, vars, enc, q)));
    const ad::Tensor grad = g.grad(q);
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back({grad[3 * i], grad[3 * i + 1], grad[3 * i + 2]});
  }
  return out;
}

Point3 ConditionalSdfModel::input_gradient(const Point3& x, const LatentFeatures& features) const {
  return input_gradients(std::span<const Point3>(&x, 1), features)[0];
}

// ---------------------------------------------------------------------------
// Checkpoints

void write_checkpoint_file(const std::filesystem::path& path, nlohmann::json meta,
                           const std::vector<std::vector<double>>& arrays) {
  std::vector<std::size_t> sizes;
  for (const auto& a : arrays) sizes.push_back(a.size());
  meta["arrays"] = sizes;
  const std::string blob = meta.dump();
  // Write to a sibling temp file and rename so a crash never leaves a torn
  // checkpoint under the final name.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArgumentError("cannot write checkpoint '" + path.string() + "'");
    out.write(kMagic, sizeof(kMagic));
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = blob.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    for (const auto& a : arrays)
      out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
    if (!out) throw ArgumentError("failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

CheckpointContents read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  const std::string where = "checkpoint '" + path.string() + "'";
  char magic[4];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw LoadError(where + ": bad magic bytes");
  std::uint32_t version = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version))) throw LoadError(where + ": truncated header");
  if (version != kCheckpointVersion)
    throw LoadError(where + ": unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) throw LoadError(where + ": truncated header");
  if (len > (std::uint64_t{1} << 30)) throw LoadError(where + ": implausible metadata length");
  std::string blob(len, '\0');
  if (!in.read(blob.data(), static_cast<std::streamsize>(len))) throw LoadError(where + ": truncated metadata");
  CheckpointContents contents;
  try {
    contents.meta = nlohmann::json::parse(blob);
    for (std::size_t n : contents.meta.at("arrays").get<std::vector<std::size_t>>()) {
      std::vector<double> a(n);
      if (!in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(n * sizeof(double))))
        throw LoadError(where + ": truncated parameter data");
      for (double v : a)
        if (!std::isfinite(v)) throw LoadError(where + ": non-finite parameter value");
      contents.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + ": malformed metadata: " + e.what());
  }
  if (in.peek() != std::ifstream::traits_type::eof()) throw LoadError(where + ": trailing bytes after data");
  return contents;
}

void save_checkpoint(const ConditionalSdfModel& model, const std::filesystem::path& path) {
  std::vector<std::vector<double>> arrays;
  for (const auto& p : model.parameters()) arrays.push_back(p.storage());
  write_checkpoint_file(path, nlohmann::json{{"model", model.config()}}, arrays);
}

ConditionalSdfModel model_from_checkpoint(const CheckpointContents& contents) {
  ModelConfig config;
  try {
    config = contents.meta.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint has no model config: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint model config invalid: ") + e.what());
  }
  ConditionalSdfModel model(config);
  auto& params = model.parameters();
  if (contents.arrays.size() < params.size()) throw LoadError("checkpoint is missing parameter arrays");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (contents.arrays[i].size() != params[i].numel())
      throw LoadError("checkpoint parameter '" + model.parameter_names()[i] + "' has the wrong size");
    params[i].storage() = contents.arrays[i];
  }
  return model;
}

ConditionalSdfModel load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint(read_checkpoint_file(path));
}

}  // namespace gensdf
