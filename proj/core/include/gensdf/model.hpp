#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/autodiff.hpp"
#include "gensdf/geometry.hpp"

namespace gensdf {

enum class EncoderVariant { global_latent, grid_local };

std::string_view to_string(EncoderVariant v);
EncoderVariant parse_encoder_variant(std::string_view name);

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::grid_local;
  std::vector<std::size_t> widths{64, 128, 256};  // per-point MLP hidden widths
  std::size_t latent_dim = 256;
  std::size_t grid_resolution = 16;  // nodes per axis over [-1, 1]^3
};

struct DecoderConfig {
  std::vector<std::size_t> hidden{128, 128, 128, 128};
  // The first layer's rows for the query coordinates are initialized as if
  // that layer only saw the 3 coordinates, times this gain, so the feature
  // does not drown x at init. 0 keeps plain fan-in init for all rows.
  double query_init_gain = 1.0;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::uint64_t init_seed = 0;
};

void validate(const ModelConfig& config);
void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

// Value-level encoder output, cached across the queries of one cloud.
struct LatentFeatures {
  EncoderVariant variant = EncoderVariant::global_latent;
  ad::Tensor global;  // [1, L]
  ad::Tensor grid;    // [G^3, L], grid-local only
  ad::GridSpec grid_spec;
};

// Conditioning feature seen by the decoder at x: the latent for the global
// variant; trilinear grid feature followed by the pooled latent otherwise.
// Points outside [-1, 1]^3 are clamped to the boundary cell.
std::vector<double> query_feature(const LatentFeatures& features, const Point3& x);

// Graph-level handles used during training.
struct ModelVars {
  std::vector<ad::Var> params;
};
struct EncodedVars {
  ad::Var global;
  ad::Var grid;  // invalid for the global variant
};

// Conditional signed distance network: point-cloud encoder plus an MLP
// decoder on (x, feature(x)). Linear layers compute y = x W + b with W
// stored [in, out].
class ConditionalSdfModel {
 public:
  explicit ConditionalSdfModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::size_t parameter_count() const;
  std::vector<ad::Tensor>& parameters() { return params_; }
  const std::vector<ad::Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t feature_dim() const;

  // --- differentiable path ---------------------------------------------------
  ModelVars bind(ad::Graph& g, bool trainable) const;
  EncodedVars encode(ad::Graph& g, const ModelVars& vars, const PointCloud& cloud) const;
  // queries [K, 3] -> predictions [K, 1]
  ad::Var predict(ad::Graph& g, const ModelVars& vars, const EncodedVars& enc, ad::Var queries) const;

  // --- inference -------------------------------------------------------------
  LatentFeatures encode(const PointCloud& cloud) const;
  double predict(const Point3& x, const LatentFeatures& features) const;
  std::vector<double> predict_batch(std::span<const Point3> xs, const LatentFeatures& features) const;
  Point3 input_gradient(const Point3& x, const LatentFeatures& features) const;
  std::vector<Point3> input_gradients(std::span<const Point3> xs, const LatentFeatures& features) const;

 private:
  struct LayerRange {
    std::size_t first = 0;  // index of the first weight in params_
    std::size_t count = 0;  // number of linear layers
  };

  void add_linear(const std::string& name, std::size_t in, std::size_t out, double gain, std::uint64_t seed);
  ad::Var run_mlp(ad::Graph& g, const ModelVars& vars, LayerRange layers, ad::Var x) const;
  ad::Var decoder_input(ad::Graph& g, const EncodedVars& enc, ad::Var queries) const;

  ModelConfig config_;
  std::vector<ad::Tensor> params_;
  std::vector<std::string> names_;
  LayerRange encoder_;
  LayerRange decoder_;
};

ad::Tensor points_to_tensor(std::span<const Point3> points);

// Checkpoint file: "GSDF", u32 version, u64 JSON length, JSON, then f64
// arrays. The JSON holds {"model": config, "arrays": [sizes...], ...}; the
// first arrays are the model parameters in declaration order, optionally
// followed by extra arrays (optimizer state).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointContents {
  nlohmann::json meta;
  std::vector<std::vector<double>> arrays;
};

void write_checkpoint_file(const std::filesystem::path& path, nlohmann::json meta,
                           const std::vector<std::vector<double>>& arrays);
CheckpointContents read_checkpoint_file(const std::filesystem::path& path);

void save_checkpoint(const ConditionalSdfModel& model, const std::filesystem::path& path);
ConditionalSdfModel load_checkpoint(const std::filesystem::path& path);
ConditionalSdfModel model_from_checkpoint(const CheckpointContents& contents);

}  // namespace gensdf
