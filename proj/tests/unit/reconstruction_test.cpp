#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "gensdf/errors.hpp"
#include "gensdf/geometry.hpp"
#include "gensdf/random.hpp"
#include "gensdf/reconstruction.hpp"
#include "test_support.hpp"

namespace gensdf {
namespace {

constexpr double kPi = std::numbers::pi;

// Independent loop count for one cube: the positive region on the cube
// surface is bounded by cP + cN - 1 curves, where positive corners connect
// along cube edges only and negative corners additionally connect across the
// diagonal of a face whose diagonals disagree.
std::size_t oracle_loops(std::uint8_t mask) {
  if (mask == 0 || mask == 255) return 0;
  auto pos = [&](int c) { return (mask >> c) & 1; };
  std::vector<int> parent(8);
  for (int i = 0; i < 8; ++i) parent[i] = i;
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto unite = [&](int a, int b) { parent[find(a)] = find(b); };
  for (int a = 0; a < 8; ++a)
    for (int bit = 0; bit < 3; ++bit) {
      const int b = a ^ (1 << bit);
      if (pos(a) == pos(b)) unite(a, b);
    }
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      const int u = 1 << ((axis + 1) % 3), v = 1 << ((axis + 2) % 3);
      const int c0 = side << axis;
      const int c[4] = {c0, c0 | u, c0 | u | v, c0 | v};
      const bool ambiguous = pos(c[0]) == pos(c[2]) && pos(c[1]) == pos(c[3]) && pos(c[0]) != pos(c[1]);
      if (!ambiguous) continue;
      if (!pos(c[0])) unite(c[0], c[2]);
      else unite(c[1], c[3]);
    }
  std::set<int> roots_pos, roots_neg;
  for (int i = 0; i < 8; ++i) (pos(i) ? roots_pos : roots_neg).insert(find(i));
  return roots_pos.size() + roots_neg.size() - 1;
}

GridField single_cube(std::uint8_t mask, std::uint64_t seed) {
  GridField f;
  f.dims = {2, 2, 2};
  f.values.resize(8);
  Rng rng(seed);
  for (int c = 0; c < 8; ++c) {
    const double mag = rng.uniform(0.1, 1.0);
    f.values[f.index(c & 1, (c >> 1) & 1, (c >> 2) & 1)] = ((mask >> c) & 1) ? mag : -mag;
  }
  return f;
}

// Random field whose boundary nodes are positive, so the extracted surface
// is closed inside the grid.
GridField random_closed_field(std::uint32_t n, std::uint64_t seed) {
  GridField f;
  f.dims = {n, n, n};
  f.values.resize(std::size_t{n} * n * n);
  Rng rng(seed);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < n; ++j)
      for (std::uint32_t k = 0; k < n; ++k) {
        const bool border = i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1;
        f.values[f.index(i, j, k)] = border ? rng.uniform(0.1, 1.0) : rng.uniform(-1.0, 1.0);
      }
  return f;
}

TEST(MarchingCubesTable, LoopCountsMatchSurfaceTopologyOracle) {
  for (int m = 0; m < 256; ++m)
    EXPECT_EQ(marching_cubes_loop_count(static_cast<std::uint8_t>(m)), oracle_loops(static_cast<std::uint8_t>(m)))
        << "mask " << m;
}

TEST(MarchingCubesTable, ComplementaryMasksDifferOnlyOnAmbiguousFaces) {
  // Single-cube masks without ambiguous faces have the same loop count as
  // their complement.
  EXPECT_EQ(marching_cubes_loop_count(1), 1u);
  EXPECT_EQ(marching_cubes_loop_count(254), 1u);
  EXPECT_EQ(marching_cubes_loop_count(0b00001111), 1u);
  // Two diagonal corners on one face: separated positives, one joint negative.
  EXPECT_EQ(marching_cubes_loop_count(0b00001001), 2u);
  EXPECT_EQ(marching_cubes_loop_count(static_cast<std::uint8_t>(~0b00001001)), 1u);
}

TEST(MarchingCubes, SingleCubePatchesAreBoundedByOneLoopPerTableEntry) {
  for (int m = 1; m < 255; ++m) {
    const auto mask = static_cast<std::uint8_t>(m);
    const TriangleMesh mesh = marching_cubes(single_cube(mask, m));
    ASSERT_FALSE(mesh.empty()) << "mask " << m;
    // Vertices sit on cube edges: at least two coordinates on the boundary.
    for (const Point3& v : mesh.vertices) {
      int on_face = 0;
      for (std::size_t a = 0; a < 3; ++a) on_face += std::abs(std::abs(v[a]) - 1.0) < 1e-12;
      EXPECT_GE(on_face, 2) << "mask " << m;
    }
    // Edges used once form the patch boundary; count its components.
    std::map<std::pair<std::uint32_t, std::uint32_t>, int> uses;
    for (const auto& t : mesh.triangles)
      for (int e = 0; e < 3; ++e) {
        const std::uint32_t a = t[e], b = t[(e + 1) % 3];
        ++uses[{std::min(a, b), std::max(a, b)}];
      }
    std::vector<std::uint32_t> parent(mesh.vertices.size());
    for (std::uint32_t i = 0; i < parent.size(); ++i) parent[i] = i;
    auto find = [&](std::uint32_t x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    std::set<std::uint32_t> boundary_vertices;
    for (const auto& [edge, n] : uses) {
      EXPECT_LE(n, 2) << "mask " << m;
      if (n != 1) continue;
      boundary_vertices.insert(edge.first);
      boundary_vertices.insert(edge.second);
      parent[find(edge.first)] = find(edge.second);
    }
    std::set<std::uint32_t> loops;
    for (std::uint32_t v : boundary_vertices) loops.insert(find(v));
    EXPECT_EQ(loops.size(), marching_cubes_loop_count(mask)) << "mask " << m;
  }
}

TEST(MarchingCubes, RandomClosedFieldsGiveWatertightOutwardMeshes) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const GridField f = random_closed_field(8, seed);
    const TriangleMesh mesh = marching_cubes(f);
    ASSERT_FALSE(mesh.empty());
    EXPECT_TRUE(is_watertight(mesh)) << "seed " << seed;
    // Negative regions are enclosed, so their volume is positive with
    // normals toward the positive (outer) side.
    EXPECT_GT(signed_volume(mesh), 0.0) << "seed " << seed;
    EXPECT_EQ(euler_characteristic(mesh) % 2, 0) << "seed " << seed;
  }
}

TEST(MarchingCubes, SphereIsWatertightGenusZeroWithAccurateVertices) {
  const double r = 0.5;
  const GridField f = evaluate_field([&](const Point3& p) { return norm(p) - r; }, 64);
  const TriangleMesh mesh = marching_cubes(f);
  ASSERT_FALSE(mesh.empty());
  EXPECT_TRUE(is_watertight(mesh));
  EXPECT_EQ(euler_characteristic(mesh), 2);
  const double h = 2.0 / 63.0;
  for (const Point3& v : mesh.vertices) EXPECT_NEAR(norm(v), r, 2 * h);
  EXPECT_NEAR(mesh_area(mesh), 4 * kPi * r * r, 0.01 * 4 * kPi * r * r);
  EXPECT_NEAR(signed_volume(mesh), 4.0 / 3.0 * kPi * r * r * r, 0.01 * 4.0 / 3.0 * kPi * r * r * r);
}

TEST(MarchingCubes, TorusHasEulerCharacteristicZero) {
  const ShapeInstance torus = make_torus(0.5, 0.2);
  const GridField f = evaluate_field([&](const Point3& p) { return exact_sdf(torus, p); }, 48);
  const TriangleMesh mesh = marching_cubes(f);
  EXPECT_TRUE(is_watertight(mesh));
  EXPECT_EQ(euler_characteristic(mesh), 0);
  EXPECT_GT(signed_volume(mesh), 0.0);
}

TEST(MarchingCubes, PlaneVerticesInterpolateExactly) {
  const GridField f = evaluate_field([](const Point3& p) { return p.x - 0.1; }, 9);
  const TriangleMesh mesh = marching_cubes(f);
  ASSERT_FALSE(mesh.empty());
  for (const Point3& v : mesh.vertices) EXPECT_NEAR(v.x, 0.1, 1e-12);
  // A 2x2 square cut through the grid.
  EXPECT_NEAR(mesh_area(mesh), 4.0, 1e-9);
}

TEST(MarchingCubes, NodesExactlyOnTheSurfaceStillCloseTheMesh) {
  // Nodes at spacing 0.5 make the sphere of radius 0.5 pass through nodes.
  const GridField f = evaluate_field([](const Point3& p) { return norm(p) - 0.5; }, 5);
  ASSERT_EQ(f.at(1, 2, 2), 0.0);
  const TriangleMesh mesh = marching_cubes(f);
  ASSERT_FALSE(mesh.empty());
  EXPECT_TRUE(is_watertight(mesh));
}

TEST(MarchingCubes, EmptyWhenFieldHasOneSign) {
  const GridField f = evaluate_field([](const Point3&) { return 1.0; }, 8);
  EXPECT_TRUE(marching_cubes(f).empty());
  EXPECT_TRUE(marching_cubes(f, 2.0).empty());
}

TEST(MarchingCubes, RejectsInvalidFields) {
  GridField f;
  f.dims = {1, 2, 2};
  f.values.resize(4);
  EXPECT_THROW(marching_cubes(f), ArgumentError);
  f.dims = {2, 2, 2};
  EXPECT_THROW(marching_cubes(f), ArgumentError);
  f.values.assign(8, 1.0);
  f.values[3] = std::nan("");
  EXPECT_THROW(marching_cubes(f), NumericError);
  f.values[3] = 1.0;
  EXPECT_THROW(marching_cubes(f, std::numeric_limits<double>::infinity()), ArgumentError);
  EXPECT_THROW(evaluate_field([](const Point3&) { return 0.0; }, 1), ArgumentError);
  EXPECT_THROW(evaluate_field([](const Point3&) { return std::nan(""); }, 4), NumericError);
}

TEST(MeshMeasures, UnitCubeByHand) {
  TriangleMesh cube;
  for (int c = 0; c < 8; ++c) cube.vertices.push_back({double(c & 1), double((c >> 1) & 1), double((c >> 2) & 1)});
  // Outward-wound faces.
  cube.triangles = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
                    {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  EXPECT_TRUE(is_watertight(cube));
  EXPECT_EQ(euler_characteristic(cube), 2);
  EXPECT_NEAR(mesh_area(cube), 6.0, 1e-15);
  EXPECT_NEAR(signed_volume(cube), 1.0, 1e-15);
  EXPECT_NEAR(triangle_area(cube, 0), 0.5, 1e-15);

  TriangleMesh open = cube;
  open.triangles.pop_back();
  EXPECT_FALSE(is_watertight(open));
}

TEST(MeshIo, ObjRoundTripIsExact) {
  testing::TempDir dir;
  const GridField f = evaluate_field([](const Point3& p) { return norm(p - Point3{0.1, -0.2, 0.05}) - 0.43; }, 20);
  const TriangleMesh mesh = marching_cubes(f);
  write_obj(mesh, dir / "m.obj");
  EXPECT_EQ(read_obj(dir / "m.obj"), mesh);
}

TEST(MeshIo, ObjReaderAcceptsSlashIndicesAndRejectsGarbage) {
  testing::TempDir dir;
  {
    std::ofstream out(dir / "a.obj");
    out << "# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2//1 3\n";
  }
  const TriangleMesh m = read_obj(dir / "a.obj");
  ASSERT_EQ(m.triangles.size(), 1u);
  EXPECT_EQ(m.triangles[0], (std::array<std::uint32_t, 3>{0, 1, 2}));

  const std::pair<const char*, const char*> bad[] = {
      {"b.obj", "v 0 0\n"},
      {"c.obj", "v 0 0 0\nf 1 2\n"},
      {"d.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n"},
      {"e.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n"},
      {"f.obj", "v 0 0 0\nf 0 1 1\n"},
  };
  for (const auto& [name, text] : bad) {
    std::ofstream(dir / name) << text;
    EXPECT_THROW(read_obj(dir / name), LoadError) << name;
  }
  EXPECT_THROW(read_obj(dir / "missing.obj"), LoadError);
}

TEST(GridIo, RoundTripIsExactAndTruncationIsRejected) {
  testing::TempDir dir;
  const GridField f = evaluate_field([](const Point3& p) { return std::sin(3 * p.x) * p.y - p.z / 7.0; }, 9, -0.8, 1.3);
  write_grid(f, dir / "g.bin");
  EXPECT_EQ(read_grid(dir / "g.bin"), f);

  const auto size = std::filesystem::file_size(dir / "g.bin");
  std::filesystem::resize_file(dir / "g.bin", size - 8);
  EXPECT_THROW(read_grid(dir / "g.bin"), LoadError);
  std::filesystem::resize_file(dir / "g.bin", 6);
  EXPECT_THROW(read_grid(dir / "g.bin"), LoadError);
}

TEST(GridEvaluation, ModelGridMatchesPointwisePrediction) {
  ModelConfig config;
  config.encoder.widths = {16};
  config.encoder.latent_dim = 8;
  config.encoder.grid_resolution = 4;
  config.decoder.hidden = {16, 16};
  const ConditionalSdfModel model(config);
  const PointCloud cloud = sample_surface(make_sphere(0.5), 64, 3);
  const GridField g = evaluate_grid(model, cloud, 8, -1.0, 1.0);
  const LatentFeatures features = model.encode(cloud);
  for (std::size_t i : {0u, 3u, 7u})
    for (std::size_t j : {0u, 5u})
      for (std::size_t k : {2u, 7u}) EXPECT_EQ(g.at(i, j, k), model.predict(g.node(i, j, k), features));
  EXPECT_THROW(evaluate_grid(model, cloud, 4), ArgumentError);
}

}  // namespace
}  // namespace gensdf
