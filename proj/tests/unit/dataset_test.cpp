#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gensdf/dataset.hpp"
#include "gensdf/errors.hpp"
#include "test_support.hpp"

namespace gensdf {
namespace {

DeskBenchmarkConfig small_desk() {
  DeskBenchmarkConfig c;
  c.labeled_per_family = 3;
  c.unlabeled_per_family = 2;
  c.test_per_family = 2;
  c.cloud_size = 64;
  c.seed = 9;
  return c;
}

TEST(DeskBenchmark, CountsAndCategoriesFollowTheConfig) {
  const LoadedDatasets d = load_datasets(make_desk_manifest(small_desk()));
  EXPECT_EQ(d.labeled.size(), 9u);
  EXPECT_EQ(d.unlabeled.size(), 2u);
  EXPECT_EQ(d.test.size(), 4u);
  EXPECT_EQ(d.labeled.categories(), (std::vector<std::string>{"box", "capsule", "sphere"}));
  EXPECT_EQ(d.unlabeled.categories(), (std::vector<std::string>{"cylinder"}));
  EXPECT_EQ(d.test.categories(), (std::vector<std::string>{"composite-union", "torus"}));
  std::set<std::string> ids;
  for (const auto& it : d.labeled.items()) {
    EXPECT_EQ(it.cloud.size(), 64u);
    ids.insert(it.id);
  }
  EXPECT_EQ(ids.size(), 9u);
}

TEST(DeskBenchmark, SameSeedSameDataDifferentSeedDifferentData) {
  const LoadedDatasets a = load_datasets(make_desk_manifest(small_desk()));
  const LoadedDatasets b = load_datasets(make_desk_manifest(small_desk()));
  DeskBenchmarkConfig other = small_desk();
  other.seed = 10;
  const LoadedDatasets c = load_datasets(make_desk_manifest(other));
  for (std::size_t i = 0; i < a.labeled.size(); ++i) {
    EXPECT_EQ(a.labeled.items()[i].cloud, b.labeled.items()[i].cloud);
    EXPECT_NE(a.labeled.items()[i].cloud, c.labeled.items()[i].cloud);
  }
}

TEST(DeskBenchmark, RandomShapesStayInsideTheUnitCube) {
  for (ShapeFamily f : {ShapeFamily::sphere, ShapeFamily::box, ShapeFamily::torus, ShapeFamily::capsule,
                        ShapeFamily::cylinder, ShapeFamily::composite_union})
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const ShapeInstance s = random_shape(f, seed);
      EXPECT_NO_THROW(validate(s));
      const Aabb box = bounding_box(s);
      for (std::size_t a = 0; a < 3; ++a) {
        EXPECT_GT(box.lo[a], -0.95) << to_string(f) << " seed " << seed;
        EXPECT_LT(box.hi[a], 0.95) << to_string(f) << " seed " << seed;
      }
    }
}

TEST(DeskBenchmark, WrittenDatasetLoadsBackIdentically) {
  testing::TempDir dir;
  const ShapeManifest m = make_desk_manifest(small_desk());
  write_dataset(m, dir.path());
  const LoadedDatasets mem = load_datasets(m);
  const LoadedDatasets disk = load_datasets(load_manifest(dir / "manifest.json"), dir.path());
  ASSERT_EQ(disk.labeled.size(), mem.labeled.size());
  for (std::size_t i = 0; i < mem.labeled.size(); ++i) {
    EXPECT_EQ(disk.labeled.items()[i].id, mem.labeled.items()[i].id);
    EXPECT_EQ(disk.labeled.items()[i].cloud, mem.labeled.items()[i].cloud);
  }
  for (std::size_t i = 0; i < mem.unlabeled.size(); ++i)
    EXPECT_EQ(disk.unlabeled.items()[i].cloud, mem.unlabeled.items()[i].cloud);
}

TEST(DeskBenchmark, OverlappingSplitsAreRejected) {
  DeskBenchmarkConfig c = small_desk();
  c.unlabeled_families = {ShapeFamily::sphere};
  EXPECT_THROW(make_desk_manifest(c), DatasetError);
}

TEST(DeskBenchmark, ConfigJson) {
  DeskBenchmarkConfig c = small_desk();
  c.test_families = {ShapeFamily::torus};
  const DeskBenchmarkConfig back = nlohmann::json(c).get<DeskBenchmarkConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  nlohmann::json bad = c;
  bad["labeled_families"] = {"teapot"};
  EXPECT_THROW(bad.get<DeskBenchmarkConfig>(), ConfigError);
  bad = c;
  bad["cloud_size"] = 0;
  EXPECT_THROW(bad.get<DeskBenchmarkConfig>(), ConfigError);
}

TEST(Datasets, DisjointnessCheck) {
  const ShapeInstance s = make_sphere(0.4);
  LabeledDataset x({make_labeled_item("a", s, sample_surface(s, 16, 0))});
  UnlabeledDataset same({make_unlabeled_item("b", s.category_id, sample_surface(s, 16, 1))});
  UnlabeledDataset other({make_unlabeled_item("c", "cylinder", sample_surface(s, 16, 2))});
  EXPECT_THROW(check_disjoint(x, same), DatasetError);
  EXPECT_NO_THROW(check_disjoint(x, other));
}

}  // namespace
}  // namespace gensdf
