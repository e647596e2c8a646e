#include "gensdf/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "gensdf/errors.hpp"

namespace gensdf {

KdTree::KdTree(const PointCloud& cloud, std::size_t leaf_size)
    : KdTree(std::vector<Point3>(cloud.begin(), cloud.end()), leaf_size) {}

KdTree::KdTree(std::vector<Point3> points, std::size_t leaf_size)
    : points_(std::move(points)), leaf_size_(leaf_size) {
  if (points_.empty()) throw ArgumentError("KdTree: cannot build over an empty point set");
  if (leaf_size_ == 0) throw ArgumentError("KdTree: leaf size must be positive");
  if (points_.size() > std::numeric_limits<std::uint32_t>::max())
    throw ArgumentError("KdTree: too many points");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  nodes_.reserve(2 * points_.size() / leaf_size_ + 1);
  build(0, static_cast<std::uint32_t>(points_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= leaf_size_) return id;

  Point3 lo = points_[order_[begin]];
  Point3 hi = lo;
  for (std::uint32_t i = begin + 1; i < end; ++i) {
    const Point3& p = points_[order_[i]];
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
  }
  const Point3 extent = hi - lo;
  std::uint8_t axis = 0;
  if (extent.y > extent[axis]) axis = 1;
  if (extent.z > extent[axis]) axis = 2;
  if (extent[axis] <= 0.0) return id;  // all points coincide; keep as a leaf

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) { return points_[a][axis] < points_[b][axis]; });
  const double split = points_[order_[mid]][axis];

  const std::int32_t left = build(begin, mid);
  const std::int32_t right = build(mid, end);
  Node& node = nodes_[static_cast<std::size_t>(id)];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

void KdTree::search(std::int32_t node_id, Point3 q, double& best_d2, std::size_t& best_index) const {
  const Node& node = nodes_[static_cast<std::size_t>(node_id)];
  if (node.left < 0) {
    for (std::uint32_t i = node.begin; i < node.end; ++i) {
      const std::uint32_t idx = order_[i];
      const double d2 = squared_distance(q, points_[idx]);
      if (d2 < best_d2 || (d2 == best_d2 && idx < best_index)) {
        best_d2 = d2;
        best_index = idx;
      }
    }
    return;
  }
  const double delta = q[node.axis] - node.split;
  const std::int32_t near = delta < 0.0 ? node.left : node.right;
  const std::int32_t far = delta < 0.0 ? node.right : node.left;
  search(near, q, best_d2, best_index);
  // Equality must still be visited: a tie with a lower index may live there.
  if (delta * delta <= best_d2) search(far, q, best_d2, best_index);
}

Neighbor KdTree::nearest(Point3 query) const {
  if (!is_finite(query)) throw ArgumentError("KdTree::nearest: non-finite query");
  double best_d2 = std::numeric_limits<double>::infinity();
  std::size_t best_index = std::numeric_limits<std::size_t>::max();
  search(0, query, best_d2, best_index);
  return Neighbor{points_[best_index], std::sqrt(best_d2), best_d2, best_index};
}

Neighbor nearest_linear_scan(std::span<const Point3> points, Point3 query) {
  if (points.empty()) throw ArgumentError("nearest_linear_scan: empty point set");
  double best_d2 = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d2 = squared_distance(query, points[i]);
    if (d2 < best_d2) {
      best_d2 = d2;
      best_index = i;
    }
  }
  return Neighbor{points[best_index], std::sqrt(best_d2), best_d2, best_index};
}

}  // namespace gensdf
