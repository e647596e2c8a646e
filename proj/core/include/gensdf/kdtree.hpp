#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "gensdf/geometry.hpp"

namespace gensdf {

struct Neighbor {
  Point3 point;
  double distance = 0.0;
  double squared_distance = 0.0;
  std::size_t index = 0;
};

// Balanced kd-tree over a fixed point set. Immutable after construction and
// safe to query from several threads.
//
// nearest() returns exactly what a linear scan comparing squared distances
// computed as dx*dx + dy*dy + dz*dz would return, including the tie rule
// (lowest index wins).
class KdTree {
 public:
  explicit KdTree(std::vector<Point3> points, std::size_t leaf_size = 16);
  explicit KdTree(const PointCloud& cloud, std::size_t leaf_size = 16);

  Neighbor nearest(Point3 query) const;

  std::span<const Point3> points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  std::size_t leaf_size() const { return leaf_size_; }

 private:
  struct Node {
    // Leaves: [begin, end) into order_. Inner nodes: split axis/value and
    // children; begin/end still cover the subtree.
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint8_t axis = 0;
    double split = 0.0;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end);
  void search(std::int32_t node, Point3 q, double& best_d2, std::size_t& best_index) const;

  std::vector<Point3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
  std::size_t leaf_size_;
};

// Exhaustive scan with the same tie rule; reference for tests and tiny sets.
Neighbor nearest_linear_scan(std::span<const Point3> points, Point3 query);

// Convenience wrapper matching the nearest-neighbor operation signature.
inline Neighbor nearest_neighbor(const KdTree& tree, Point3 query) { return tree.nearest(query); }

}  // namespace gensdf
