#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/geometry.hpp"
#include "gensdf/io.hpp"
#include "gensdf/kdtree.hpp"

namespace gensdf {

struct LabeledItem {
  std::string id;
  ShapeInstance shape;
  PointCloud cloud;
  std::shared_ptr<const KdTree> tree;
};

// Clouds whose labels are unavailable. Deliberately holds no shape.
struct UnlabeledItem {
  std::string id;
  std::string category;
  PointCloud cloud;
  std::shared_ptr<const KdTree> tree;
};

class LabeledDataset {
 public:
  LabeledDataset() = default;
  explicit LabeledDataset(std::vector<LabeledItem> items);

  const std::vector<LabeledItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  // Sorted, unique.
  std::vector<std::string> categories() const;

 private:
  std::vector<LabeledItem> items_;
};

class UnlabeledDataset {
 public:
  UnlabeledDataset() = default;
  explicit UnlabeledDataset(std::vector<UnlabeledItem> items);

  const std::vector<UnlabeledItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::vector<std::string> categories() const;

 private:
  std::vector<UnlabeledItem> items_;
};

// DatasetError when the two datasets share a category.
void check_disjoint(const LabeledDataset& labeled, const UnlabeledDataset& unlabeled);

LabeledItem make_labeled_item(std::string id, ShapeInstance shape, PointCloud cloud);
UnlabeledItem make_unlabeled_item(std::string id, std::string category, PointCloud cloud);

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct DeskBenchmarkConfig {
  std::vector<ShapeFamily> labeled_families{ShapeFamily::sphere, ShapeFamily::box, ShapeFamily::capsule};
  std::vector<ShapeFamily> unlabeled_families{ShapeFamily::cylinder};
  std::vector<ShapeFamily> test_families{ShapeFamily::torus, ShapeFamily::composite_union};
  std::size_t labeled_per_family = 20;
  std::size_t unlabeled_per_family = 20;
  std::size_t test_per_family = 10;
  std::size_t cloud_size = 2048;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DeskBenchmarkConfig& c);
void from_json(const nlohmann::json& j, DeskBenchmarkConfig& c);

// Random instance of a family with parameters and a uniform-scale pose that
// keep the surface inside roughly [-0.8, 0.8]^3.
ShapeInstance random_shape(ShapeFamily family, std::uint64_t seed);

ShapeManifest make_desk_manifest(const DeskBenchmarkConfig& config);

struct LoadedDatasets {
  LabeledDataset labeled;
  UnlabeledDataset unlabeled;
  LabeledDataset test;  // labels only ever used for evaluation
};

// Clouds come from entry.cloud_path (relative to base_dir) when set, else
// are sampled from the shape with a seed derived from (manifest seed, index).
LoadedDatasets load_datasets(const ShapeManifest& manifest, const std::filesystem::path& base_dir = {});

// Writes the manifest plus one .xyz cloud per entry into dir.
void write_dataset(const ShapeManifest& manifest, const std::filesystem::path& dir);

}  // namespace gensdf
