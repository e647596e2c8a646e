#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "gensdf/geometry.hpp"
#include "gensdf/model.hpp"

namespace gensdf {

// Samples of a scalar field on a regular grid. Node (i, j, k), i along x,
// lies at lo + (hi - lo) * (i, j, k) / (dims - 1) and is stored at
// (i * ny + j) * nz + k.
struct GridField {
  std::array<std::uint32_t, 3> dims{};
  Point3 lo{-1.0, -1.0, -1.0};
  Point3 hi{1.0, 1.0, 1.0};
  std::vector<double> values;

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (i * dims[1] + j) * dims[2] + k; }
  double at(std::size_t i, std::size_t j, std::size_t k) const { return values[index(i, j, k)]; }
  Point3 node(std::size_t i, std::size_t j, std::size_t k) const;

  friend bool operator==(const GridField&, const GridField&) = default;
};

void validate(const GridField& field);

using FieldFunction = std::function<double(const Point3&)>;

// Cubic grid of resolution^3 nodes over [lo, hi]^3.
GridField evaluate_field(const FieldFunction& f, std::size_t resolution, double lo = -1.0, double hi = 1.0);
// Encodes the cloud once and predicts at every node.
GridField evaluate_grid(const ConditionalSdfModel& model, const PointCloud& cloud, std::size_t resolution,
                        double lo = -1.0, double hi = 1.0);
GridField evaluate_grid(const ConditionalSdfModel& model, const LatentFeatures& features, std::size_t resolution,
                        double lo = -1.0, double hi = 1.0);

struct TriangleMesh {
  std::vector<Point3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;

  bool empty() const { return triangles.empty(); }
  friend bool operator==(const TriangleMesh&, const TriangleMesh&) = default;
};

// Zero-level-set extraction. Nodes exactly at iso are treated as iso + 1e-12.
// Triangles wind counter-clockwise seen from the side where the field is
// above iso; triangles with area below 1e-12 are dropped.
TriangleMesh marching_cubes(const GridField& field, double iso = 0.0);

// Number of polygon loops the case table emits for a corner mask (bit c set
// when corner c is above iso; corner c sits at offset (c&1, c>>1&1, c>>2&1)).
std::size_t marching_cubes_loop_count(std::uint8_t mask);

double mesh_area(const TriangleMesh& mesh);
double triangle_area(const TriangleMesh& mesh, std::size_t t);
// Every undirected edge is used by exactly two triangles.
bool is_watertight(const TriangleMesh& mesh);
// V - E + F over referenced vertices.
long euler_characteristic(const TriangleMesh& mesh);
// Positive for closed meshes whose normals point outward.
double signed_volume(const TriangleMesh& mesh);

// ASCII OBJ: "v x y z" lines with 17 significant digits then "f a b c"
// (1-based). Reading accepts "f a/b/c" style indices.
void write_obj(const TriangleMesh& mesh, const std::filesystem::path& path);
TriangleMesh read_obj(const std::filesystem::path& path);

// Binary dump: u32 x3 dims, f64 x6 bounds (lo then hi), f64 values.
void write_grid(const GridField& field, const std::filesystem::path& path);
GridField read_grid(const std::filesystem::path& path);

}  // namespace gensdf
