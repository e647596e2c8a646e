#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gensdf::ad {

// Dense row-major f64 tensor. Most operations work on rank-2 tensors
// [rows, cols]; reductions produce shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  // For rank-2 tensors; rank-1 tensors behave as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

std::string shape_string(const std::vector<std::size_t>& shape);

class Graph;

// Handle to a node recorded on a Graph. Cheap to copy; only valid while the
// owning graph is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Dynamic tape. Nodes are appended in evaluation order, which is a
// topological order, so backward is a single reverse sweep. Gradient buffers
// exist only for nodes that (transitively) depend on a requires_grad leaf.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value);
  Var variable(Tensor value);  // leaf with requires_grad
  Var constant(Tensor value);  // leaf without gradient

  // Seeds d(loss)/d(loss) = 1 and propagates. The loss must have one
  // element; a graph supports a single backward pass.
  void backward(Var loss);

  // Accumulated gradient of a requires_grad node (zeros if unreached).
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t allocated_gradients() const;

  // Set when a relu/abs/sqrt/max-pool saw an input exactly on a kink.
  bool kink_encountered() const { return kink_; }
  // Hash of every piecewise choice made during the forward pass (relu
  // masks, max-pool argmaxes, grid cells). Equal signatures mean the same
  // smooth piece was evaluated.
  std::uint64_t activation_signature() const { return signature_; }
  // Signatures cost a hash per activation; they are only computed when
  // tracking is on (grad_check turns it on).
  void set_tracking(bool on) { tracking_ = on; }
  bool tracking() const { return tracking_; }

  // --- op-author interface -------------------------------------------------
  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of node `id`, allocated on first use. Empty span when the
  // node does not require a gradient.
  std::span<double> grad_buffer(std::size_t id);
  void note_kink() { kink_ = true; }
  void mix_signature(std::uint64_t value);

 private:
  friend class Var;
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    const char* op = "leaf";
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  bool kink_ = false;
  bool tracking_ = false;
  std::uint64_t signature_ = 0x243F6A8885A308D3ULL;
};

// --- operations --------------------------------------------------------------

Var matmul(Var a, Var b);
// Elementwise; b may also be a bias row ([1, n] or [n]) broadcast over a's rows.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise, equal shapes
Var scalar_mul(Var a, double s);
Var relu(Var a);
Var tanh(Var a);
Var abs(Var a);
Var square(Var a);
Var sqrt(Var a);
Var concat(std::span<const Var> parts);  // along columns
Var concat(std::initializer_list<Var> parts);
Var reduce_sum(Var a);
Var reduce_mean(Var a);
Var broadcast_rows(Var row, std::size_t rows);  // [1, c] -> [rows, c]
Var max_pool_over_points(Var a);                 // [n, c] -> [1, c]

// Regular grid of G^3 nodes spanning [lo, hi]^3. Node (i, j, k) with i along
// x is stored at row (i * G + j) * G + k.
struct GridSpec {
  std::size_t resolution = 16;
  double lo = -1.0;
  double hi = 1.0;
};

// Trilinear splat of per-point features [n, c] onto the grid followed by a
// per-node weighted mean; nodes that receive no weight are zero. Positions
// [n, 3] are treated as data (no gradient).
Var grid_scatter_mean(Var features, const Tensor& positions, const GridSpec& grid);
// Trilinear interpolation of a [G^3, c] grid at positions [k, 3].
// Differentiable in both the grid and the positions. Positions outside the
// bounds are clamped (zero gradient along the clamped axis).
Var grid_gather_trilinear(Var grid, Var positions, const GridSpec& grid_spec);

// C = A * B for row-major A [m, k], B [k, n]. Every output element sums over k
// in increasing order, so a row's result does not depend on m.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m, std::size_t k,
          std::size_t n);

// --- gradient checking -------------------------------------------------------

using ScalarFunction = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
  double h = 1e-4;
  // 0 checks every coordinate; otherwise a seeded random subset.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;     // finite-difference stencil crossed a kink
  bool kink_at_point = false;   // evaluated exactly on a kink: nothing checked
};

// Compares reverse-mode gradients of f against central differences.
// Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const ScalarFunction& f, const std::vector<Tensor>& point,
                           const GradCheckOptions& options = {});
GradCheckResult grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& point, double h = 1e-4);

}  // namespace gensdf::ad
