#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gensdf/geometry.hpp"

namespace gensdf {

// Point cloud files. ".xyz": one "x y z" per line, ASCII. ".pcb": u64
// little-endian count followed by count float32 triplets (little-endian).
// The format is chosen from the extension.
PointCloud load_point_cloud(const std::filesystem::path& path);
void save_point_cloud(const PointCloud& cloud, const std::filesystem::path& path);

PointCloud read_xyz(const std::filesystem::path& path);
void write_xyz(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud read_pcb(const std::filesystem::path& path);
void write_pcb(const PointCloud& cloud, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Shape dataset manifest

enum class DatasetSplit { labeled, unlabeled, test };

std::string_view to_string(DatasetSplit split);
DatasetSplit parse_dataset_split(std::string_view name);

struct ManifestEntry {
  std::string id;
  ShapeInstance shape;
  DatasetSplit split = DatasetSplit::labeled;
  std::string cloud_path;  // relative to the manifest directory; may be empty
};

struct ShapeManifest {
  std::uint64_t seed = 0;
  std::size_t cloud_size = 0;
  std::vector<ManifestEntry> entries;
};

void to_json(nlohmann::json& j, const ShapeInstance& shape);
void from_json(const nlohmann::json& j, ShapeInstance& shape);
void to_json(nlohmann::json& j, const ShapeManifest& manifest);
void from_json(const nlohmann::json& j, ShapeManifest& manifest);

// Loading validates every shape and that the category sets of the three
// splits are pairwise disjoint (DatasetError otherwise).
ShapeManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const ShapeManifest& manifest, const std::filesystem::path& path);
void check_split_disjointness(const ShapeManifest& manifest);

// FNV-1a 64-bit over file bytes, rendered as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);
std::string hash_string(std::string_view text);

}  // namespace gensdf
