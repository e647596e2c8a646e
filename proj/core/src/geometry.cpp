#include "gensdf/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>
#include <numeric>

#include "gensdf/errors.hpp"
#include "gensdf/kdtree.hpp"
#include "gensdf/random.hpp"

namespace gensdf {

namespace {

constexpr double kPi = std::numbers::pi;

std::size_t expected_parameter_count(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::sphere: return 1;
    case ShapeFamily::box: return 3;
    case ShapeFamily::torus: return 2;
    case ShapeFamily::capsule: return 2;
    case ShapeFamily::cylinder: return 2;
    case ShapeFamily::composite_union: return 0;
  }
  throw ConfigError("unknown shape family");
}

Point3 to_local(const Pose& pose, Point3 x) { return (x - pose.translation) / pose.scale; }
Point3 to_world(const Pose& pose, Point3 q) { return pose.translation + q * pose.scale; }

double length2(double a, double b) { return std::sqrt(a * a + b * b); }

// Distance functions of the canonical (unposed) primitives.
double primitive_sdf(const ShapeInstance& s, Point3 q) {
  const auto& p = s.parameters;
  switch (s.family) {
    case ShapeFamily::sphere:
      return norm(q) - p[0];
    case ShapeFamily::box: {
      const Point3 d{std::abs(q.x) - p[0], std::abs(q.y) - p[1], std::abs(q.z) - p[2]};
      const Point3 outside{std::max(d.x, 0.0), std::max(d.y, 0.0), std::max(d.z, 0.0)};
      return norm(outside) + std::min(std::max(d.x, std::max(d.y, d.z)), 0.0);
    }
    case ShapeFamily::torus:
      return length2(length2(q.x, q.z) - p[0], q.y) - p[1];
    case ShapeFamily::capsule: {
      const double y = std::clamp(q.y, -p[0], p[0]);
      return norm(Point3{q.x, q.y - y, q.z}) - p[1];
    }
    case ShapeFamily::cylinder: {
      const double dr = length2(q.x, q.z) - p[0];
      const double dy = std::abs(q.y) - p[1];
      return std::min(std::max(dr, dy), 0.0) + length2(std::max(dr, 0.0), std::max(dy, 0.0));
    }
    case ShapeFamily::composite_union: {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& part : s.parts) best = std::min(best, exact_sdf(part, q));
      return best;
    }
  }
  throw ConfigError("unknown shape family");
}

Aabb primitive_box(const ShapeInstance& s) {
  const auto& p = s.parameters;
  switch (s.family) {
    case ShapeFamily::sphere: return {{-p[0], -p[0], -p[0]}, {p[0], p[0], p[0]}};
    case ShapeFamily::box: return {{-p[0], -p[1], -p[2]}, {p[0], p[1], p[2]}};
    case ShapeFamily::torus: {
      const double r = p[0] + p[1];
      return {{-r, -p[1], -r}, {r, p[1], r}};
    }
    case ShapeFamily::capsule: {
      const double h = p[0] + p[1];
      return {{-p[1], -h, -p[1]}, {p[1], h, p[1]}};
    }
    case ShapeFamily::cylinder: return {{-p[0], -p[1], -p[0]}, {p[0], p[1], p[0]}};
    case ShapeFamily::composite_union: {
      Aabb box{{1e300, 1e300, 1e300}, {-1e300, -1e300, -1e300}};
      for (const auto& part : s.parts) {
        const Aabb b = bounding_box(part);
        box.lo = {std::min(box.lo.x, b.lo.x), std::min(box.lo.y, b.lo.y), std::min(box.lo.z, b.lo.z)};
        box.hi = {std::max(box.hi.x, b.hi.x), std::max(box.hi.y, b.hi.y), std::max(box.hi.z, b.hi.z)};
      }
      return box;
    }
  }
  throw ConfigError("unknown shape family");
}

double primitive_area(const ShapeInstance& s) {
  const auto& p = s.parameters;
  switch (s.family) {
    case ShapeFamily::sphere: return 4.0 * kPi * p[0] * p[0];
    case ShapeFamily::box: return 8.0 * (p[0] * p[1] + p[1] * p[2] + p[0] * p[2]);
    case ShapeFamily::torus: return 4.0 * kPi * kPi * p[0] * p[1];
    case ShapeFamily::capsule: return 4.0 * kPi * p[1] * p[0] + 4.0 * kPi * p[1] * p[1];
    case ShapeFamily::cylinder: return 4.0 * kPi * p[0] * p[1] + 2.0 * kPi * p[0] * p[0];
    case ShapeFamily::composite_union: {
      double a = 0.0;
      for (const auto& part : s.parts) a += surface_area(part);
      return a;
    }
  }
  throw ConfigError("unknown shape family");
}

Point3 random_direction(Rng& rng) {
  for (;;) {
    const Point3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(v);
    if (n > 1e-12) return v / n;
  }
}

// One area-uniform point on the canonical primitive surface.
Point3 sample_primitive(const ShapeInstance& s, Rng& rng);

Point3 sample_composite(const ShapeInstance& s, Rng& rng) {
  std::vector<double> cumulative;
  cumulative.reserve(s.parts.size());
  double total = 0.0;
  for (const auto& part : s.parts) {
    total += surface_area(part);
    cumulative.push_back(total);
  }
  // Rejection keeps the union surface area-uniform: a point on part i is kept
  // only if no other part contains it.
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const double u = rng.uniform() * total;
    const std::size_t i = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    const std::size_t part_index = std::min(i, s.parts.size() - 1);
    const ShapeInstance& part = s.parts[part_index];
    const Point3 p = to_world(part.pose, sample_primitive(part, rng));
    bool covered = false;
    for (std::size_t j = 0; j < s.parts.size() && !covered; ++j)
      if (j != part_index && exact_sdf(s.parts[j], p) < -1e-12) covered = true;
    if (!covered) return p;
  }
  throw ShapeError("sample_surface: composite surface is fully covered by its parts");
}

Point3 sample_primitive(const ShapeInstance& s, Rng& rng) {
  const auto& p = s.parameters;
  switch (s.family) {
    case ShapeFamily::sphere:
      return random_direction(rng) * p[0];
    case ShapeFamily::box: {
      const double ax = p[1] * p[2], ay = p[0] * p[2], az = p[0] * p[1];
      const double u = rng.uniform() * (ax + ay + az);
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double a = rng.uniform(-1.0, 1.0);
      const double b = rng.uniform(-1.0, 1.0);
      if (u < ax) return {side * p[0], a * p[1], b * p[2]};
      if (u < ax + ay) return {a * p[0], side * p[1], b * p[2]};
      return {a * p[0], b * p[1], side * p[2]};
    }
    case ShapeFamily::torus: {
      const double major = p[0], minor = p[1];
      const double u = rng.uniform(0.0, 2.0 * kPi);
      double v = 0.0;
      // Area element is proportional to (major + minor cos v).
      for (;;) {
        v = rng.uniform(0.0, 2.0 * kPi);
        if (rng.uniform() * (major + minor) <= major + minor * std::cos(v)) break;
      }
      const double ring = major + minor * std::cos(v);
      return {ring * std::cos(u), minor * std::sin(v), ring * std::sin(u)};
    }
    case ShapeFamily::capsule: {
      const double half = p[0], r = p[1];
      const double side_area = 4.0 * kPi * r * half;
      const double cap_area = 4.0 * kPi * r * r;
      if (rng.uniform() * (side_area + cap_area) < side_area) {
        const double u = rng.uniform(0.0, 2.0 * kPi);
        return {r * std::cos(u), rng.uniform(-half, half), r * std::sin(u)};
      }
      const Point3 d = random_direction(rng);
      return Point3{0.0, d.y >= 0.0 ? half : -half, 0.0} + d * r;
    }
    case ShapeFamily::cylinder: {
      const double r = p[0], half = p[1];
      const double side_area = 4.0 * kPi * r * half;
      const double cap_area = 2.0 * kPi * r * r;
      const double u = rng.uniform(0.0, 2.0 * kPi);
      if (rng.uniform() * (side_area + cap_area) < side_area)
        return {r * std::cos(u), rng.uniform(-half, half), r * std::sin(u)};
      const double radius = r * std::sqrt(rng.uniform());
      const double y = rng.uniform() < 0.5 ? -half : half;
      return {radius * std::cos(u), y, radius * std::sin(u)};
    }
    case ShapeFamily::composite_union:
      return sample_composite(s, rng);
  }
  throw ConfigError("unknown shape family");
}

void validate_parameters(const ShapeInstance& shape) {
  if (shape.family != ShapeFamily::composite_union && !shape.parts.empty())
    throw ConfigError("only composite-union shapes may have parts");
  if (shape.parameters.size() != expected_parameter_count(shape.family))
    throw ConfigError("shape '" + std::string(to_string(shape.family)) + "' expects " +
                      std::to_string(expected_parameter_count(shape.family)) + " parameters, got " +
                      std::to_string(shape.parameters.size()));
  for (double v : shape.parameters)
    if (!std::isfinite(v) || v <= 0.0)
      throw ShapeError("shape '" + std::string(to_string(shape.family)) +
                       "' has a zero, negative or non-finite parameter");
  if (!(shape.pose.scale > 0.0) || !std::isfinite(shape.pose.scale) || !is_finite(shape.pose.translation))
    throw ShapeError("shape pose must have a positive finite scale and finite translation");
  if (shape.family == ShapeFamily::torus && shape.parameters[1] >= shape.parameters[0])
    throw ShapeError("torus minor radius must be smaller than its major radius");
  if (shape.family == ShapeFamily::composite_union) {
    if (shape.parts.empty()) throw ShapeError("composite-union needs at least one part");
    for (const auto& part : shape.parts) validate_parameters(part);
  }
}

}  // namespace

PointCloud::PointCloud(std::vector<Point3> points) : points_(std::move(points)) {
  if (points_.empty()) throw ArgumentError("PointCloud must contain at least one point");
  for (const auto& p : points_)
    if (!is_finite(p)) throw ArgumentError("PointCloud contains a non-finite point");
}

std::string_view to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::sphere: return "sphere";
    case ShapeFamily::box: return "box";
    case ShapeFamily::torus: return "torus";
    case ShapeFamily::capsule: return "capsule";
    case ShapeFamily::cylinder: return "cylinder";
    case ShapeFamily::composite_union: return "composite-union";
  }
  return "unknown";
}

ShapeFamily parse_shape_family(std::string_view name) {
  for (ShapeFamily f : {ShapeFamily::sphere, ShapeFamily::box, ShapeFamily::torus, ShapeFamily::capsule,
                        ShapeFamily::cylinder, ShapeFamily::composite_union})
    if (to_string(f) == name) return f;
  throw ConfigError("unknown shape family '" + std::string(name) + "'");
}

bool ShapeInstance::approximate_sdf() const {
  if (family != ShapeFamily::composite_union) return false;
  if (parts.size() > 1) return true;
  return !parts.empty() && parts.front().approximate_sdf();
}

ShapeInstance make_sphere(double radius, Pose pose) {
  return ShapeInstance{ShapeFamily::sphere, {radius}, pose, "sphere", {}};
}
ShapeInstance make_box(Point3 half_extents, Pose pose) {
  return ShapeInstance{ShapeFamily::box, {half_extents.x, half_extents.y, half_extents.z}, pose, "box", {}};
}
ShapeInstance make_torus(double major_radius, double minor_radius, Pose pose) {
  return ShapeInstance{ShapeFamily::torus, {major_radius, minor_radius}, pose, "torus", {}};
}
ShapeInstance make_capsule(double half_height, double radius, Pose pose) {
  return ShapeInstance{ShapeFamily::capsule, {half_height, radius}, pose, "capsule", {}};
}
ShapeInstance make_cylinder(double radius, double half_height, Pose pose) {
  return ShapeInstance{ShapeFamily::cylinder, {radius, half_height}, pose, "cylinder", {}};
}
ShapeInstance make_union(std::vector<ShapeInstance> parts, Pose pose) {
  return ShapeInstance{ShapeFamily::composite_union, {}, pose, "composite-union", std::move(parts)};
}

void validate(const ShapeInstance& shape) {
  validate_parameters(shape);
  const Aabb box = bounding_box(shape);
  constexpr double kSlack = 1e-12;
  if (box.lo.x < -1.0 - kSlack || box.lo.y < -1.0 - kSlack || box.lo.z < -1.0 - kSlack ||
      box.hi.x > 1.0 + kSlack || box.hi.y > 1.0 + kSlack || box.hi.z > 1.0 + kSlack)
    throw ShapeError("shape '" + std::string(to_string(shape.family)) + "' does not fit inside [-1, 1]^3");
}

Aabb bounding_box(const ShapeInstance& shape) {
  const Aabb local = primitive_box(shape);
  return {to_world(shape.pose, local.lo), to_world(shape.pose, local.hi)};
}

double surface_area(const ShapeInstance& shape) {
  return primitive_area(shape) * shape.pose.scale * shape.pose.scale;
}

double exact_sdf(const ShapeInstance& shape, Point3 x) {
  return primitive_sdf(shape, to_local(shape.pose, x)) * shape.pose.scale;
}

PointCloud sample_surface(const ShapeInstance& shape, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ArgumentError("sample_surface: n must be at least 1");
  validate_parameters(shape);
  Rng rng(derive_seed(seed, {0x5355524641434531ULL}));
  std::vector<Point3> points;
  points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) points.push_back(to_world(shape.pose, sample_primitive(shape, rng)));
  return PointCloud(std::move(points));
}

namespace {

std::vector<Point3> draw_query_points(std::span<const Point3> cloud, const QuerySamplingOptions& options,
                                      std::uint64_t seed) {
  if (options.n_near + options.n_uniform == 0)
    throw ArgumentError("sample_queries: n_near + n_uniform must be at least 1");
  if (!(options.sigma_near > 0.0)) throw ArgumentError("sample_queries: sigma_near must be positive");
  Rng rng(derive_seed(seed, {0x5155455259ULL}));
  std::vector<Point3> xs;
  xs.reserve(options.n_near + options.n_uniform);
  for (std::size_t i = 0; i < options.n_near; ++i) {
    const Point3 p = cloud[rng.index(cloud.size())];
    const double dx = rng.normal(), dy = rng.normal(), dz = rng.normal();
    xs.push_back(p + Point3{dx, dy, dz} * options.sigma_near);
  }
  for (std::size_t i = 0; i < options.n_uniform; ++i) {
    const double x = rng.uniform(-1.0, 1.0), y = rng.uniform(-1.0, 1.0), z = rng.uniform(-1.0, 1.0);
    xs.push_back({x, y, z});
  }
  return xs;
}

}  // namespace

UnlabeledQueryBatch sample_unlabeled_queries(const KdTree& tree, const QuerySamplingOptions& options,
                                             std::uint64_t seed) {
  UnlabeledQueryBatch batch;
  batch.x = draw_query_points(tree.points(), options, seed);
  batch.nn.reserve(batch.x.size());
  batch.nn_dist.reserve(batch.x.size());
  for (const Point3& x : batch.x) {
    const Neighbor nb = tree.nearest(x);
    batch.nn.push_back(nb.point);
    batch.nn_dist.push_back(nb.distance);
  }
  return batch;
}

std::vector<QuerySample> sample_queries(const ShapeInstance& shape, const KdTree& tree,
                                        const QuerySamplingOptions& options, std::uint64_t seed,
                                        bool with_labels) {
  const std::vector<Point3> xs = draw_query_points(tree.points(), options, seed);
  std::vector<QuerySample> samples;
  samples.reserve(xs.size());
  for (const Point3& x : xs) {
    const Neighbor nb = tree.nearest(x);
    QuerySample s;
    s.x = x;
    s.nn = nb.point;
    s.nn_dist = nb.distance;
    s.nn_index = nb.index;
    if (with_labels) s.gt_sdf = exact_sdf(shape, x);
    samples.push_back(s);
  }
  return samples;
}

std::vector<QuerySample> sample_queries(const ShapeInstance& shape, const PointCloud& cloud,
                                        const QuerySamplingOptions& options, std::uint64_t seed,
                                        bool with_labels) {
  return sample_queries(shape, KdTree(cloud), options, seed, with_labels);
}

UnlabeledQueryBatch strip_labels(std::span<const QuerySample> samples) {
  UnlabeledQueryBatch batch;
  batch.x.reserve(samples.size());
  batch.nn.reserve(samples.size());
  batch.nn_dist.reserve(samples.size());
  for (const auto& s : samples) {
    batch.x.push_back(s.x);
    batch.nn.push_back(s.nn);
    batch.nn_dist.push_back(s.nn_dist);
  }
  return batch;
}

std::vector<int> ground_truth_signs(std::span<const QuerySample> samples) {
  std::vector<int> signs;
  signs.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.gt_sdf) throw DatasetError("ground-truth sign requested for an unlabeled sample");
    signs.push_back(*s.gt_sdf < 0.0 ? -1 : 1);
  }
  return signs;
}

NormalizationTransform fit_normalization(const PointCloud& cloud, double target_half_extent) {
  if (!(target_half_extent > 0.0)) throw ArgumentError("normalization target must be positive");
  Point3 lo = cloud[0], hi = cloud[0];
  for (const Point3& p : cloud) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  NormalizationTransform t;
  t.center = (lo + hi) * 0.5;
  const Point3 half = (hi - lo) * 0.5;
  const double largest = std::max({half.x, half.y, half.z});
  t.scale = largest > 0.0 ? target_half_extent / largest : 1.0;
  return t;
}

PointCloud apply_normalization(const PointCloud& cloud, const NormalizationTransform& transform) {
  std::vector<Point3> out;
  out.reserve(cloud.size());
  for (const Point3& p : cloud) out.push_back(transform.apply(p));
  return PointCloud(std::move(out));
}

}  // namespace gensdf
