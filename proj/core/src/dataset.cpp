#include "gensdf/dataset.hpp"

#include <algorithm>
#include <set>

#include "gensdf/errors.hpp"
#include "gensdf/random.hpp"

namespace gensdf {

namespace fs = std::filesystem;

LabeledDataset::LabeledDataset(std::vector<LabeledItem> items) : items_(std::move(items)) {
  for (const auto& item : items_)
    if (!item.tree) throw ArgumentError("labeled item '" + item.id + "' has no kd-tree");
}

std::vector<std::string> LabeledDataset::categories() const {
  std::set<std::string> s;
  for (const auto& item : items_) s.insert(item.shape.category_id);
  return {s.begin(), s.end()};
}

UnlabeledDataset::UnlabeledDataset(std::vector<UnlabeledItem> items) : items_(std::move(items)) {
  for (const auto& item : items_)
    if (!item.tree) throw ArgumentError("unlabeled item '" + item.id + "' has no kd-tree");
}

std::vector<std::string> UnlabeledDataset::categories() const {
  std::set<std::string> s;
  for (const auto& item : items_) s.insert(item.category);
  return {s.begin(), s.end()};
}

void check_disjoint(const LabeledDataset& labeled, const UnlabeledDataset& unlabeled) {
  const auto a = labeled.categories();
  const auto b = unlabeled.categories();
  std::vector<std::string> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  if (!common.empty())
    throw DatasetError("labeled and unlabeled datasets share category '" + common.front() + "'");
}

LabeledItem make_labeled_item(std::string id, ShapeInstance shape, PointCloud cloud) {
  auto tree = std::make_shared<const KdTree>(cloud);
  return LabeledItem{std::move(id), std::move(shape), std::move(cloud), std::move(tree)};
}

UnlabeledItem make_unlabeled_item(std::string id, std::string category, PointCloud cloud) {
  auto tree = std::make_shared<const KdTree>(cloud);
  return UnlabeledItem{std::move(id), std::move(category), std::move(cloud), std::move(tree)};
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> family_names(const std::vector<ShapeFamily>& families) {
  std::vector<std::string> out;
  for (ShapeFamily f : families) out.emplace_back(to_string(f));
  return out;
}

std::vector<ShapeFamily> parse_families(const std::vector<std::string>& names) {
  std::vector<ShapeFamily> out;
  for (const auto& n : names) out.push_back(parse_shape_family(n));
  return out;
}

Pose random_pose(Rng& rng, double max_offset) {
  Pose pose;
  pose.translation = {rng.uniform(-max_offset, max_offset), rng.uniform(-max_offset, max_offset),
                      rng.uniform(-max_offset, max_offset)};
  pose.scale = rng.uniform(0.9, 1.1);
  return pose;
}

}  // namespace

void to_json(nlohmann::json& j, const DeskBenchmarkConfig& c) {
  j = nlohmann::json{{"labeled_families", family_names(c.labeled_families)},
                     {"unlabeled_families", family_names(c.unlabeled_families)},
                     {"test_families", family_names(c.test_families)},
                     {"labeled_per_family", c.labeled_per_family},
                     {"unlabeled_per_family", c.unlabeled_per_family},
                     {"test_per_family", c.test_per_family},
                     {"cloud_size", c.cloud_size},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DeskBenchmarkConfig& c) {
  try {
    c = DeskBenchmarkConfig{};
    if (j.contains("labeled_families"))
      c.labeled_families = parse_families(j.at("labeled_families").get<std::vector<std::string>>());
    if (j.contains("unlabeled_families"))
      c.unlabeled_families = parse_families(j.at("unlabeled_families").get<std::vector<std::string>>());
    if (j.contains("test_families"))
      c.test_families = parse_families(j.at("test_families").get<std::vector<std::string>>());
    c.labeled_per_family = j.value("labeled_per_family", c.labeled_per_family);
    c.unlabeled_per_family = j.value("unlabeled_per_family", c.unlabeled_per_family);
    c.test_per_family = j.value("test_per_family", c.test_per_family);
    c.cloud_size = j.value("cloud_size", c.cloud_size);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed benchmark config: ") + e.what());
  }
  if (c.cloud_size == 0) throw ConfigError("cloud_size must be positive");
}

ShapeInstance random_shape(ShapeFamily family, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(family)}));
  switch (family) {
    case ShapeFamily::sphere:
      return make_sphere(rng.uniform(0.35, 0.6), random_pose(rng, 0.1));
    case ShapeFamily::box:
      return make_box({rng.uniform(0.25, 0.55), rng.uniform(0.25, 0.55), rng.uniform(0.25, 0.55)},
                      random_pose(rng, 0.1));
    case ShapeFamily::capsule:
      return make_capsule(rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.35), random_pose(rng, 0.1));
    case ShapeFamily::cylinder:
      return make_cylinder(rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.5), random_pose(rng, 0.1));
    case ShapeFamily::torus:
      return make_torus(rng.uniform(0.4, 0.55), rng.uniform(0.12, 0.2), random_pose(rng, 0.05));
    case ShapeFamily::composite_union: {
      // A box with a sphere bulging out of one side.
      const double half = rng.uniform(0.25, 0.4);
      Pose box_pose;
      box_pose.translation = {rng.uniform(-0.15, -0.05), 0.0, 0.0};
      Pose sphere_pose;
      sphere_pose.translation = {rng.uniform(0.2, 0.3), rng.uniform(-0.1, 0.1), 0.0};
      std::vector<ShapeInstance> parts{make_box({half, half, half}, box_pose),
                                       make_sphere(rng.uniform(0.25, 0.35), sphere_pose)};
      return make_union(std::move(parts), random_pose(rng, 0.05));
    }
  }
  throw ConfigError("unknown shape family");
}

ShapeManifest make_desk_manifest(const DeskBenchmarkConfig& config) {
  ShapeManifest manifest;
  manifest.seed = config.seed;
  manifest.cloud_size = config.cloud_size;
  std::uint64_t counter = 0;
  auto add = [&](const std::vector<ShapeFamily>& families, std::size_t per_family, DatasetSplit split) {
    for (ShapeFamily family : families)
      for (std::size_t i = 0; i < per_family; ++i) {
        ManifestEntry e;
        e.shape = random_shape(family, derive_seed(config.seed, {0x5348415045, counter++}));
        validate(e.shape);
        e.id = std::string(to_string(split)) + "-" + std::string(to_string(family)) + "-" + std::to_string(i);
        e.split = split;
        manifest.entries.push_back(std::move(e));
      }
  };
  add(config.labeled_families, config.labeled_per_family, DatasetSplit::labeled);
  add(config.unlabeled_families, config.unlabeled_per_family, DatasetSplit::unlabeled);
  add(config.test_families, config.test_per_family, DatasetSplit::test);
  check_split_disjointness(manifest);
  return manifest;
}

LoadedDatasets load_datasets(const ShapeManifest& manifest, const fs::path& base_dir) {
  check_split_disjointness(manifest);
  std::vector<LabeledItem> labeled, test;
  std::vector<UnlabeledItem> unlabeled;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const ManifestEntry& e = manifest.entries[i];
    validate(e.shape);
    PointCloud cloud = e.cloud_path.empty()
                           ? sample_surface(e.shape, manifest.cloud_size, derive_seed(manifest.seed, {0x434C4F5544, i}))
                           : load_point_cloud(base_dir / e.cloud_path);
    switch (e.split) {
      case DatasetSplit::labeled: labeled.push_back(make_labeled_item(e.id, e.shape, std::move(cloud))); break;
      case DatasetSplit::test: test.push_back(make_labeled_item(e.id, e.shape, std::move(cloud))); break;
      case DatasetSplit::unlabeled:
        unlabeled.push_back(make_unlabeled_item(e.id, e.shape.category_id, std::move(cloud)));
        break;
    }
  }
  LoadedDatasets out{LabeledDataset(std::move(labeled)), UnlabeledDataset(std::move(unlabeled)),
                     LabeledDataset(std::move(test))};
  check_disjoint(out.labeled, out.unlabeled);
  return out;
}

void write_dataset(const ShapeManifest& manifest, const fs::path& dir) {
  fs::create_directories(dir / "clouds");
  ShapeManifest written = manifest;
  for (std::size_t i = 0; i < written.entries.size(); ++i) {
    ManifestEntry& e = written.entries[i];
    if (e.cloud_path.empty()) {
      const PointCloud cloud =
          sample_surface(e.shape, manifest.cloud_size, derive_seed(manifest.seed, {0x434C4F5544, i}));
      e.cloud_path = "clouds/" + e.id + ".xyz";
      write_xyz(cloud, dir / e.cloud_path);
    }
  }
  save_manifest(written, dir / "manifest.json");
}

}  // namespace gensdf
