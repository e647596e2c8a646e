#include "gensdf/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>

#include "gensdf/errors.hpp"
#include "gensdf/random.hpp"

namespace gensdf::ad {

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw GraphError("tensor shape must have at least one dimension");
  for (std::size_t d : shape)
    if (d == 0) throw GraphError("tensor dimensions must be positive, got " + shape_string(shape));
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != product(shape_))
    throw GraphError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) throw GraphError("item() on a tensor with " + std::to_string(data_.size()) + " elements");
  return data_[0];
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const {
  if (!graph_) throw GraphError("use of an unbound Var");
  return graph_->nodes_[id_].value;
}

bool Var::requires_grad() const { return graph_ && graph_->nodes_[id_].requires_grad; }

Var Graph::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  record("leaf", std::move(value), std::span<const Var>{}, nullptr);
  nodes_.back().requires_grad = rg;
  return Var(this, nodes_.size() - 1);
}

Var Graph::variable(Tensor value) {
  value.set_requires_grad(true);
  return leaf(std::move(value));
}

Var Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Graph::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  for (double v : value.data())
    if (!std::isfinite(v)) throw NumericError(std::string("op '") + op + "' produced a non-finite value");
  bool rg = false;
  for (const Var& in : inputs) {
    if (in.graph_ != this) throw GraphError(std::string("op '") + op + "' mixes Vars from different graphs");
    rg = rg || nodes_[in.id_].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.requires_grad = rg;
  if (rg) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::span<double> Graph::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.value.numel(), 0.0);
  return node.grad;
}

void Graph::mix_signature(std::uint64_t value) { signature_ = mix_seed(signature_ ^ value); }

std::size_t Graph::allocated_gradients() const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return !n.grad.empty(); }));
}

void Graph::backward(Var loss) {
  if (loss.graph_ != this) throw GraphError("backward: loss belongs to another graph");
  if (backward_done_) throw GraphError("backward: already run on this graph; build a new graph per step");
  if (nodes_[loss.id_].value.numel() != 1)
    throw GraphError("backward: loss must be scalar, got shape " + shape_string(nodes_[loss.id_].value.shape()));
  backward_done_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss.id_)[0] += 1.0;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, id);
  }
}

Tensor Graph::grad(Var v) const {
  if (v.graph_ != this) throw GraphError("grad: Var belongs to another graph");
  const Node& node = nodes_[v.id_];
  if (!node.requires_grad) throw GraphError("grad: node does not require a gradient");
  if (node.grad.empty()) return Tensor(node.value.shape());
  return Tensor(node.value.shape(), node.grad);
}

// ---------------------------------------------------------------------------
// GEMM

namespace {

// Register-tiled kernel on GCC/Clang vector extensions. Each output element
// is accumulated over k in increasing order with a separate multiply and add
// (the library is built with -ffp-contract=off), so vector lanes, tails and
// scalar code all produce the same bits.
using v4d = double __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof(v)); }

template <std::size_t R, std::size_t V>
inline void tile(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                 std::size_t k) {
  v4d acc[R][V] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * ldb;
    v4d bv[V];
    for (std::size_t q = 0; q < V; ++q) bv[q] = load4(bp + 4 * q);
    for (std::size_t r = 0; r < R; ++r) {
      const double ar = a[r * lda + p];
      const v4d av = {ar, ar, ar, ar};
      for (std::size_t q = 0; q < V; ++q) acc[r][q] += av * bv[q];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < V; ++q) store4(c + r * ldc + 4 * q, acc[r][q]);
}

template <std::size_t R>
inline void row_block(const double* a, std::size_t lda, const double* b, double* c, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) tile<R, 4>(a, lda, b + j, n, c + j, n, k);
  for (; j + 4 <= n; j += 4) tile<R, 1>(a, lda, b + j, n, c + j, n, k);
  for (; j < n; ++j)
    for (std::size_t r = 0; r < R; ++r) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[r * lda + p] * b[p * n + j];
      c[r * n + j] = acc;
    }
}

std::vector<double> transpose(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

}  // namespace

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m, std::size_t k,
          std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<4>(&a[i * k], k, b.data(), &c[i * n], k, n);
  for (; i < m; ++i) row_block<1>(&a[i * k], k, b.data(), &c[i * n], k, n);
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void require_rank2(Var v, const char* op) {
  if (v.value().rank() != 2)
    throw GraphError(std::string(op) + ": expected a rank-2 tensor, got " + shape_string(v.shape()));
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

bool is_bias_of(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.numel() == a.cols() && (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1)) &&
         a.shape() != b.shape();
}

template <typename F, typename D>
Var unary(Var a, const char* op, F forward, D derivative) {
  Graph& g = *a.graph();
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = forward(x[i]);
  const std::size_t in = a.id();
  return g.record(op, std::move(out), {a}, [in, derivative](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(in);
    if (gx.empty()) return;
    const auto& x = g.value(in).data();
    const auto& y = g.value(self).data();
    const auto gy = g.grad_buffer(self);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * derivative(x[i], y[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw GraphError("matmul: shape mismatch " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({m, n});
  gemm(a.value().data(), b.value().data(), out.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Graph& g, std::size_t self) {
    const auto gc = g.grad_buffer(self);
    if (auto ga = g.grad_buffer(ia); !ga.empty()) {
      const std::vector<double> bt = transpose(g.value(ib).data(), k, n);
      std::vector<double> tmp(m * k);
      gemm(gc, bt, tmp, m, n, k);
      accumulate(ga, tmp);
    }
    if (auto gb = g.grad_buffer(ib); !gb.empty()) {
      const std::vector<double> at = transpose(g.value(ia).data(), m, k);
      std::vector<double> tmp(k * n);
      gemm(at, gc, tmp, k, m, n);
      accumulate(gb, tmp);
    }
  });
}

namespace {

Var add_or_sub(Var a, Var b, double sign, const char* op) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  bool bias = false;
  if (x.shape() == y.shape()) {
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + sign * y[i];
  } else if (is_bias_of(x, y)) {
    bias = true;
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + sign * y[c];
  } else {
    throw GraphError(std::string(op) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(y.shape()));
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record(op, std::move(out), {a, b}, [ia, ib, sign, bias](Graph& g, std::size_t self) {
    const auto gy = g.grad_buffer(self);
    if (auto ga = g.grad_buffer(ia); !ga.empty()) accumulate(ga, gy);
    if (auto gb = g.grad_buffer(ib); !gb.empty()) {
      if (!bias) {
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += sign * gy[i];
      } else {
        const std::size_t cols = gb.size();
        const std::size_t rows = gy.size() / cols;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += sign * gy[r * cols + c];
      }
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return add_or_sub(a, b, 1.0, "add"); }
Var sub(Var a, Var b) { return add_or_sub(a, b, -1.0, "sub"); }

Var mul(Var a, Var b) {
  if (a.shape() != b.shape())
    throw GraphError("mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph()->record("mul", std::move(out), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const auto gz = g.grad_buffer(self);
    if (auto ga = g.grad_buffer(ia); !ga.empty()) {
      const auto& y = g.value(ib).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gz[i] * y[i];
    }
    if (auto gb = g.grad_buffer(ib); !gb.empty()) {
      const auto& x = g.value(ia).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gz[i] * x[i];
    }
  });
}

Var scalar_mul(Var a, double s) {
  return unary(a, "scalar_mul", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var relu(Var a) {
  Graph& g = *a.graph();
  const auto x = a.value().data();
  for (double v : x)
    if (v == 0.0) g.note_kink();
  if (g.tracking()) {
    std::uint64_t mask_hash = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > 0.0) mask_hash = mix_seed(mask_hash ^ (i + 1));
    g.mix_signature(mask_hash);
  }
  return unary(a, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var abs(Var a) {
  Graph& g = *a.graph();
  const auto x = a.value().data();
  for (double v : x)
    if (v == 0.0) g.note_kink();
  if (g.tracking()) {
    std::uint64_t sign_hash = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] < 0.0) sign_hash = mix_seed(sign_hash ^ (i + 1));
    g.mix_signature(sign_hash);
  }
  return unary(a, "abs", [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(a, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(Var a) {
  Graph& g = *a.graph();
  for (double v : a.value().data()) {
    if (v == 0.0) g.note_kink();
    if (v < 0.0) throw NumericError("op 'sqrt' produced a non-finite value (negative input)");
  }
  return unary(a, "sqrt", [](double v) { return std::sqrt(v); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw GraphError("concat: no inputs");
  Graph& g = *parts[0].graph();
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank2(p, "concat");
    if (p.graph() != &g) throw GraphError("concat mixes Vars from different graphs");
    if (p.rows() != rows)
      throw GraphError("concat: row mismatch " + shape_string(parts[0].shape()) + " vs " + shape_string(p.shape()));
    total += p.cols();
  }
  Tensor out({rows, total});
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.cols();
    const auto src = p.value().data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&src[r * w], w, &out[r * total + offset]);
    ids.push_back(p.id());
    offsets.push_back(offset);
    widths.push_back(w);
    offset += w;
  }
  auto backward = [ids, offsets, widths, rows, total](Graph& g, std::size_t self) {
    const auto gy = g.grad_buffer(self);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      auto gx = g.grad_buffer(ids[t]);
      if (gx.empty()) continue;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < widths[t]; ++c) gx[r * widths[t] + c] += gy[r * total + offsets[t] + c];
    }
  };
  return g.record("concat", std::move(out), parts, std::move(backward));
}

Var reduce_sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t in = a.id();
  return a.graph()->record("reduce_sum", Tensor::scalar(s), {a}, [in](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(in);
    const double gy = g.grad_buffer(self)[0];
    for (double& v : gx) v += gy;
  });
}

Var reduce_mean(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const double n = static_cast<double>(a.value().numel());
  const std::size_t in = a.id();
  return a.graph()->record("reduce_mean", Tensor::scalar(s / n), {a}, [in, n](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(in);
    const double gy = g.grad_buffer(self)[0] / n;
    for (double& v : gx) v += gy;
  });
}

Var broadcast_rows(Var row, std::size_t rows) {
  const Tensor& x = row.value();
  if (!(x.rank() == 1 || (x.rank() == 2 && x.rows() == 1)))
    throw GraphError("broadcast_rows: expected a single row, got " + shape_string(x.shape()));
  if (rows == 0) throw GraphError("broadcast_rows: rows must be positive");
  const std::size_t cols = x.cols();
  Tensor out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data().data(), cols, &out[r * cols]);
  const std::size_t in = row.id();
  return row.graph()->record("broadcast_rows", std::move(out), {row}, [in, rows, cols](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(in);
    const auto gy = g.grad_buffer(self);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[c] += gy[r * cols + c];
  });
}

Var max_pool_over_points(Var a) {
  require_rank2(a, "max_pool_over_points");
  Graph& g = *a.graph();
  const std::size_t rows = a.rows(), cols = a.cols();
  const auto x = a.value().data();
  Tensor out({1, cols});
  auto argmax = std::make_shared<std::vector<std::size_t>>(cols, 0);
  std::uint64_t h = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    std::size_t best = 0;
    bool tie = false;
    for (std::size_t r = 1; r < rows; ++r) {
      const double v = x[r * cols + c];
      if (v > x[best * cols + c]) {
        best = r;
        tie = false;
      } else if (v == x[best * cols + c]) {
        tie = true;
      }
    }
    // Ties between dead relu units (value 0) carry zero gradient either way.
    if (tie && x[best * cols + c] != 0.0) g.note_kink();
    (*argmax)[c] = best;
    out[c] = x[best * cols + c];
    h = mix_seed(h ^ (best * 0x9E3779B97F4A7C15ULL + c));
  }
  g.mix_signature(h);
  const std::size_t in = a.id();
  return g.record("max_pool_over_points", std::move(out), {a}, [in, argmax, cols](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(in);
    const auto gy = g.grad_buffer(self);
    for (std::size_t c = 0; c < cols; ++c) gx[(*argmax)[c] * cols + c] += gy[c];
  });
}

// ---------------------------------------------------------------------------
// Grid operations

namespace {

struct TrilinearStencil {
  std::array<std::size_t, 8> node{};
  std::array<double, 8> weight{};
  std::array<std::size_t, 3> cell{};
  std::array<double, 3> frac{};
  std::array<bool, 3> clamped{};
};

TrilinearStencil stencil_at(const double* pos, const GridSpec& spec) {
  const std::size_t res = spec.resolution;
  const double to_grid = static_cast<double>(res - 1) / (spec.hi - spec.lo);
  TrilinearStencil s;
  for (int a = 0; a < 3; ++a) {
    double u = (pos[a] - spec.lo) * to_grid;
    if (u < 0.0 || u > static_cast<double>(res - 1)) {
      s.clamped[a] = true;
      u = std::clamp(u, 0.0, static_cast<double>(res - 1));
    }
    const std::size_t c = std::min(static_cast<std::size_t>(u), res - 2);
    s.cell[a] = c;
    s.frac[a] = u - static_cast<double>(c);
  }
  for (int corner = 0; corner < 8; ++corner) {
    const int di = (corner >> 2) & 1, dj = (corner >> 1) & 1, dk = corner & 1;
    const double wx = di ? s.frac[0] : 1.0 - s.frac[0];
    const double wy = dj ? s.frac[1] : 1.0 - s.frac[1];
    const double wz = dk ? s.frac[2] : 1.0 - s.frac[2];
    s.weight[corner] = wx * wy * wz;
    s.node[corner] = ((s.cell[0] + di) * res + (s.cell[1] + dj)) * res + (s.cell[2] + dk);
  }
  return s;
}

void check_grid_spec(const GridSpec& spec) {
  if (spec.resolution < 2) throw GraphError("grid resolution must be at least 2");
  if (!(spec.hi > spec.lo)) throw GraphError("grid bounds must satisfy lo < hi");
}

}  // namespace

Var grid_scatter_mean(Var features, const Tensor& positions, const GridSpec& spec) {
  require_rank2(features, "grid_scatter_mean");
  check_grid_spec(spec);
  const std::size_t n = features.rows(), c = features.cols();
  if (positions.rank() != 2 || positions.rows() != n || positions.cols() != 3)
    throw GraphError("grid_scatter_mean: positions must be [" + std::to_string(n) + ", 3], got " +
                     shape_string(positions.shape()));
  const std::size_t nodes = spec.resolution * spec.resolution * spec.resolution;
  auto stencils = std::make_shared<std::vector<TrilinearStencil>>(n);
  auto weight_sum = std::make_shared<std::vector<double>>(nodes, 0.0);
  Tensor out({nodes, c});
  const auto f = features.value().data();
  for (std::size_t p = 0; p < n; ++p) {
    (*stencils)[p] = stencil_at(&positions.data()[3 * p], spec);
    const TrilinearStencil& s = (*stencils)[p];
    for (int corner = 0; corner < 8; ++corner) {
      const double w = s.weight[corner];
      if (w == 0.0) continue;
      (*weight_sum)[s.node[corner]] += w;
      double* dst = &out[s.node[corner] * c];
      const double* src = &f[p * c];
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
    }
  }
  for (std::size_t node = 0; node < nodes; ++node) {
    const double w = (*weight_sum)[node];
    if (w == 0.0) continue;
    double* dst = &out[node * c];
    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] /= w;
  }
  const std::size_t in = features.id();
  return features.graph()->record(
      "grid_scatter_mean", std::move(out), {features}, [in, stencils, weight_sum, c](Graph& g, std::size_t self) {
        auto gf = g.grad_buffer(in);
        const auto gy = g.grad_buffer(self);
        for (std::size_t p = 0; p < stencils->size(); ++p) {
          const TrilinearStencil& s = (*stencils)[p];
          for (int corner = 0; corner < 8; ++corner) {
            const double w = s.weight[corner];
            if (w == 0.0) continue;
            const double scale = w / (*weight_sum)[s.node[corner]];
            const double* src = &gy[s.node[corner] * c];
            double* dst = &gf[p * c];
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += scale * src[ch];
          }
        }
      });
}

Var grid_gather_trilinear(Var grid, Var positions, const GridSpec& spec) {
  require_rank2(grid, "grid_gather_trilinear");
  require_rank2(positions, "grid_gather_trilinear");
  check_grid_spec(spec);
  const std::size_t nodes = spec.resolution * spec.resolution * spec.resolution;
  if (grid.rows() != nodes)
    throw GraphError("grid_gather_trilinear: grid must have " + std::to_string(nodes) + " rows, got " +
                     shape_string(grid.shape()));
  if (positions.cols() != 3) throw GraphError("grid_gather_trilinear: positions must have 3 columns");
  Graph& g = *grid.graph();
  const std::size_t k = positions.rows(), c = grid.cols();
  auto stencils = std::make_shared<std::vector<TrilinearStencil>>(k);
  const auto gv = grid.value().data();
  const auto pv = positions.value().data();
  Tensor out({k, c});
  std::uint64_t h = 0;
  for (std::size_t q = 0; q < k; ++q) {
    const TrilinearStencil s = stencil_at(&pv[3 * q], spec);
    (*stencils)[q] = s;
    if (g.tracking()) h = mix_seed(h ^ (s.node[0] * 8 + (s.clamped[0] ? 1 : 0) + (s.clamped[1] ? 2 : 0) + (s.clamped[2] ? 4 : 0)));
    double* dst = &out[q * c];
    for (int corner = 0; corner < 8; ++corner) {
      const double w = s.weight[corner];
      const double* src = &gv[s.node[corner] * c];
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * src[ch];
    }
  }
  g.mix_signature(h);
  const double to_grid = static_cast<double>(spec.resolution - 1) / (spec.hi - spec.lo);
  const std::size_t ig = grid.id(), ip = positions.id();
  return g.record("grid_gather_trilinear", std::move(out), {grid, positions},
                  [ig, ip, stencils, c, to_grid](Graph& g, std::size_t self) {
                    const auto gy = g.grad_buffer(self);
                    auto ggrid = g.grad_buffer(ig);
                    auto gpos = g.grad_buffer(ip);
                    const auto gv = g.value(ig).data();
                    for (std::size_t q = 0; q < stencils->size(); ++q) {
                      const TrilinearStencil& s = (*stencils)[q];
                      const double* up = &gy[q * c];
                      if (!ggrid.empty()) {
                        for (int corner = 0; corner < 8; ++corner) {
                          double* dst = &ggrid[s.node[corner] * c];
                          const double w = s.weight[corner];
                          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += w * up[ch];
                        }
                      }
                      if (!gpos.empty()) {
                        for (int corner = 0; corner < 8; ++corner) {
                          const int bits[3] = {(corner >> 2) & 1, (corner >> 1) & 1, corner & 1};
                          double dotv = 0.0;
                          const double* src = &gv[s.node[corner] * c];
                          for (std::size_t ch = 0; ch < c; ++ch) dotv += src[ch] * up[ch];
                          for (int a = 0; a < 3; ++a) {
                            if (s.clamped[a]) continue;
                            double dw = bits[a] ? 1.0 : -1.0;
                            for (int b = 0; b < 3; ++b) {
                              if (b == a) continue;
                              dw *= bits[b] ? s.frac[b] : 1.0 - s.frac[b];
                            }
                            gpos[3 * q + a] += dw * to_grid * dotv;
                          }
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

struct Evaluation {
  double value = 0.0;
  std::uint64_t signature = 0;
  bool kink = false;
};

Evaluation evaluate(const ScalarFunction& f, const std::vector<Tensor>& point) {
  Graph g;
  g.set_tracking(true);
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const Tensor& t : point) vars.push_back(g.constant(t));
  const Var out = f(g, vars);
  return {out.item(), g.activation_signature(), g.kink_encountered()};
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, const std::vector<Tensor>& point,
                           const GradCheckOptions& options) {
  Graph g;
  g.set_tracking(true);
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const Tensor& t : point) vars.push_back(g.variable(t));
  const Var out = f(g, vars);
  if (out.value().numel() != 1) throw GraphError("grad_check: function must return a scalar");
  GradCheckResult result;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < point.size(); ++t)
    for (std::size_t i = 0; i < point[t].numel(); ++i) coords.emplace_back(t, i);
  if (g.kink_encountered()) {
    result.kink_at_point = true;
    result.excluded = coords.size();
    return result;
  }
  const std::uint64_t base_signature = g.activation_signature();
  g.backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(vars.size());
  for (const Var& v : vars) analytic.push_back(g.grad(v));

  if (options.max_coordinates > 0 && options.max_coordinates < coords.size()) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_coordinates; ++i)
      std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
    coords.resize(options.max_coordinates);
  }

  std::vector<Tensor> probe = point;
  for (const auto& [t, i] : coords) {
    const double x0 = point[t][i];
    probe[t][i] = x0 + options.h;
    const Evaluation plus = evaluate(f, probe);
    probe[t][i] = x0 - options.h;
    const Evaluation minus = evaluate(f, probe);
    probe[t][i] = x0;
    if (plus.kink || minus.kink || plus.signature != base_signature || minus.signature != base_signature) {
      ++result.excluded;
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * options.h);
    const double a = analytic[t][i];
    result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    ++result.checked;
  }
  return result;
}

GradCheckResult grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& point, double h) {
  GradCheckOptions options;
  options.h = h;
  return grad_check([&f](Graph& g, std::span<const Var> vars) { return f(g, vars[0]); }, std::vector<Tensor>{point},
                    options);
}

}  // namespace gensdf::ad
