#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gensdf {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend constexpr Point3 operator+(Point3 a, Point3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Point3 operator-(Point3 a, Point3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend constexpr Point3 operator*(Point3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend constexpr Point3 operator*(double s, Point3 a) { return a * s; }
  friend constexpr Point3 operator/(Point3 a, double s) { return {a.x / s, a.y / s, a.z / s}; }
  friend constexpr bool operator==(const Point3&, const Point3&) = default;

  constexpr double operator[](std::size_t axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
};

constexpr double dot(Point3 a, Point3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Point3 cross(Point3 a, Point3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Point3 a) { return std::sqrt(dot(a, a)); }
constexpr double squared_distance(Point3 a, Point3 b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}
inline double distance(Point3 a, Point3 b) { return std::sqrt(squared_distance(a, b)); }
inline bool is_finite(Point3 p) { return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z); }

// Unordered surface sample. Always nonempty with finite coordinates.
class PointCloud {
 public:
  explicit PointCloud(std::vector<Point3> points);

  std::size_t size() const { return points_.size(); }
  const Point3& operator[](std::size_t i) const { return points_[i]; }
  std::span<const Point3> points() const { return points_; }
  auto begin() const { return points_.begin(); }
  auto end() const { return points_.end(); }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;

 private:
  std::vector<Point3> points_;
};

// ---------------------------------------------------------------------------
// Analytic shapes

enum class ShapeFamily { sphere, box, torus, capsule, cylinder, composite_union };

std::string_view to_string(ShapeFamily family);
// Throws ConfigError on unknown names.
ShapeFamily parse_shape_family(std::string_view name);

// Translation followed by a uniform scale about the shape origin, so that
// scale * sdf((x - translation) / scale) stays an exact distance.
struct Pose {
  Point3 translation{};
  double scale = 1.0;

  friend bool operator==(const Pose&, const Pose&) = default;
};

// Parameters per family (all primitives are centered at the origin, axis y):
//   sphere    {radius}
//   box       {half_x, half_y, half_z}
//   torus     {major_radius, minor_radius}
//   capsule   {half_height, radius}      segment along y plus radius
//   cylinder  {radius, half_height}      capped
//   composite-union: no parameters, `parts` holds primitives with their own poses
struct ShapeInstance {
  ShapeFamily family = ShapeFamily::sphere;
  std::vector<double> parameters;
  Pose pose;
  std::string category_id;
  std::vector<ShapeInstance> parts;

  // True when exact_sdf is only a bound (union of overlapping parts).
  bool approximate_sdf() const;

  friend bool operator==(const ShapeInstance&, const ShapeInstance&) = default;
};

ShapeInstance make_sphere(double radius, Pose pose = {});
ShapeInstance make_box(Point3 half_extents, Pose pose = {});
ShapeInstance make_torus(double major_radius, double minor_radius, Pose pose = {});
ShapeInstance make_capsule(double half_height, double radius, Pose pose = {});
ShapeInstance make_cylinder(double radius, double half_height, Pose pose = {});
ShapeInstance make_union(std::vector<ShapeInstance> parts, Pose pose = {});

struct Aabb {
  Point3 lo;
  Point3 hi;
};

// Throws ConfigError for parameter-count problems and ShapeError for
// degenerate values or a surface leaving [-1, 1]^3.
void validate(const ShapeInstance& shape);
Aabb bounding_box(const ShapeInstance& shape);
double surface_area(const ShapeInstance& shape);

// Signed distance, negative inside. For composite-union the minimum over
// parts (a lower bound near part intersections).
double exact_sdf(const ShapeInstance& shape, Point3 x);

// n area-uniform surface points; deterministic per seed.
PointCloud sample_surface(const ShapeInstance& shape, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Query points

class KdTree;

struct QuerySample {
  Point3 x;
  std::optional<double> gt_sdf;
  Point3 nn;             // nearest conditioning-cloud point
  double nn_dist = 0.0;  // |x - nn|
  std::size_t nn_index = 0;
};

// Self-supervised view of a query batch. It has no label field at all, so
// code paths that consume it cannot read ground truth.
struct UnlabeledQueryBatch {
  std::vector<Point3> x;
  std::vector<Point3> nn;
  std::vector<double> nn_dist;

  std::size_t size() const { return x.size(); }
};

struct QuerySamplingOptions {
  std::size_t n_near = 0;
  std::size_t n_uniform = 0;
  double sigma_near = 0.05;
};

// Near-surface (cloud point + isotropic Gaussian) then uniform-in-cube
// samples. nn fields are always filled; gt_sdf only when with_labels.
std::vector<QuerySample> sample_queries(const ShapeInstance& shape, const KdTree& tree,
                                        const QuerySamplingOptions& options, std::uint64_t seed,
                                        bool with_labels);
std::vector<QuerySample> sample_queries(const ShapeInstance& shape, const PointCloud& cloud,
                                        const QuerySamplingOptions& options, std::uint64_t seed,
                                        bool with_labels);
// Same sampling without any shape, for raw clouds.
UnlabeledQueryBatch sample_unlabeled_queries(const KdTree& tree, const QuerySamplingOptions& options,
                                             std::uint64_t seed);

UnlabeledQueryBatch strip_labels(std::span<const QuerySample> samples);
// +1 / -1 per sample from gt_sdf (zero counts as +1). Throws DatasetError
// when a sample carries no label.
std::vector<int> ground_truth_signs(std::span<const QuerySample> samples);

// ---------------------------------------------------------------------------
// Normalization of external clouds

struct NormalizationTransform {
  Point3 center{};
  double scale = 1.0;  // normalized = (p - center) * scale

  Point3 apply(Point3 p) const { return (p - center) * scale; }
  Point3 invert(Point3 p) const { return p / scale + center; }
};

// Recenters on the bounding-box center and scales the largest half-extent to
// `target_half_extent`.
NormalizationTransform fit_normalization(const PointCloud& cloud, double target_half_extent = 0.8);
PointCloud apply_normalization(const PointCloud& cloud, const NormalizationTransform& transform);

}  // namespace gensdf
