#include "gensdf/reconstruction.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "gensdf/errors.hpp"

namespace gensdf {

namespace fs = std::filesystem;

Point3 GridField::node(std::size_t i, std::size_t j, std::size_t k) const {
  auto coord = [](double lo, double hi, std::size_t idx, std::uint32_t n) {
    return lo + (hi - lo) * static_cast<double>(idx) / static_cast<double>(n - 1);
  };
  return {coord(lo.x, hi.x, i, dims[0]), coord(lo.y, hi.y, j, dims[1]), coord(lo.z, hi.z, k, dims[2])};
}

void validate(const GridField& field) {
  for (std::uint32_t d : field.dims)
    if (d < 2) throw ArgumentError("grid field needs at least 2 nodes per axis");
  if (!(field.hi.x > field.lo.x && field.hi.y > field.lo.y && field.hi.z > field.lo.z))
    throw ArgumentError("grid field bounds must satisfy lo < hi");
  const std::size_t n = std::size_t{field.dims[0]} * field.dims[1] * field.dims[2];
  if (field.values.size() != n)
    throw ArgumentError("grid field has " + std::to_string(field.values.size()) + " values, expected " +
                        std::to_string(n));
  for (double v : field.values)
    if (!std::isfinite(v)) throw NumericError("grid field contains a non-finite value");
}

namespace {

GridField empty_field(std::size_t resolution, double lo, double hi) {
  if (resolution < 2) throw ArgumentError("grid resolution must be at least 2");
  if (!(hi > lo)) throw ArgumentError("grid bounds must satisfy lo < hi");
  GridField f;
  const auto r = static_cast<std::uint32_t>(resolution);
  f.dims = {r, r, r};
  f.lo = {lo, lo, lo};
  f.hi = {hi, hi, hi};
  f.values.resize(resolution * resolution * resolution);
  return f;
}

}  // namespace

GridField evaluate_field(const FieldFunction& fn, std::size_t resolution, double lo, double hi) {
  GridField f = empty_field(resolution, lo, hi);
  for (std::size_t i = 0; i < resolution; ++i)
    for (std::size_t j = 0; j < resolution; ++j)
      for (std::size_t k = 0; k < resolution; ++k) {
        const Point3 p = f.node(i, j, k);
        const double v = fn(p);
        if (!std::isfinite(v)) {
          std::ostringstream os;
          os << "non-finite field value at node (" << p.x << ", " << p.y << ", " << p.z << ")";
          throw NumericError(os.str());
        }
        f.values[f.index(i, j, k)] = v;
      }
  return f;
}

GridField evaluate_grid(const ConditionalSdfModel& model, const LatentFeatures& features, std::size_t resolution,
                        double lo, double hi) {
  if (resolution < 8) throw ArgumentError("grid resolution must be at least 8, got " + std::to_string(resolution));
  GridField f = empty_field(resolution, lo, hi);
  std::vector<Point3> slab;
  slab.reserve(resolution * resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    slab.clear();
    for (std::size_t j = 0; j < resolution; ++j)
      for (std::size_t k = 0; k < resolution; ++k) slab.push_back(f.node(i, j, k));
    std::vector<double> values;
    try {
      values = model.predict_batch(slab, features);
    } catch (const NumericError& e) {
      const Point3 p = slab.front();
      std::ostringstream os;
      os << e.what() << " while evaluating the slab of nodes at x = " << p.x;
      throw NumericError(os.str());
    }
    std::copy(values.begin(), values.end(), f.values.begin() + static_cast<std::ptrdiff_t>(f.index(i, 0, 0)));
  }
  return f;
}

GridField evaluate_grid(const ConditionalSdfModel& model, const PointCloud& cloud, std::size_t resolution, double lo,
                        double hi) {
  return evaluate_grid(model, model.encode(cloud), resolution, lo, hi);
}

// ---------------------------------------------------------------------------
// Case table

namespace {

using Vec = std::array<double, 3>;

Vec corner_offset(int c) { return {double(c & 1), double((c >> 1) & 1), double((c >> 2) & 1)}; }

struct Edge {
  int a, b;  // corners, a has the axis bit clear
  int axis;
};

std::array<Edge, 12> make_edges() {
  std::array<Edge, 12> edges{};
  int e = 0;
  for (int axis = 0; axis < 3; ++axis)
    for (int c = 0; c < 8; ++c)
      if (!(c & (1 << axis))) edges[e++] = {c, c | (1 << axis), axis};
  return edges;
}

const std::array<Edge, 12> kEdges = make_edges();

int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e)
    if ((kEdges[e].a == a && kEdges[e].b == b) || (kEdges[e].a == b && kEdges[e].b == a)) return e;
  throw std::logic_error("corners do not share an edge");
}

Vec edge_mid(int e) {
  const Vec a = corner_offset(kEdges[e].a), b = corner_offset(kEdges[e].b);
  return {(a[0] + b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2};
}

Vec sub(Vec a, Vec b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec crossv(Vec a, Vec b) { return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]}; }
double dotv(Vec a, Vec b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

bool share_face(int e1, int e2) {
  const Edge &a = kEdges[e1], &b = kEdges[e2];
  for (int axis = 0; axis < 3; ++axis)
    if (axis != a.axis && axis != b.axis && ((a.a >> axis) & 1) == ((b.a >> axis) & 1)) return true;
  return false;
}

struct CaseEntry {
  std::vector<std::array<std::uint8_t, 3>> triangles;  // edge ids
  std::uint8_t loops = 0;
};

// Builds the polygon(s) of one corner configuration by walking the six
// faces. On each face the crossing edges are joined so that, on ambiguous
// faces, positive corners end up separated; both cells sharing a face make
// the same choice, which keeps the surface closed. Each segment p -> q is
// oriented so that cross(face_normal, q - p) points to the positive side;
// chaining the segments yields loops that wind counter-clockwise seen from
// the positive side.
CaseEntry build_case(std::uint8_t mask) {
  auto positive = [mask](int c) { return (mask >> c) & 1; };
  std::array<int, 12> next;
  next.fill(-1);
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      const int u = (axis + 1) % 3, v = (axis + 2) % 3;
      const int base = side << axis;
      const int q[4] = {base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)};
      Vec n{0, 0, 0};
      n[axis] = side ? 1.0 : -1.0;
      std::vector<std::array<int, 3>> segs;  // edge, edge, positive reference corner
      int crossings = 0;
      for (int i = 0; i < 4; ++i) crossings += positive(q[i]) != positive(q[(i + 1) % 4]);
      if (crossings == 2) {
        int es[2], k = 0, ref = -1;
        for (int i = 0; i < 4; ++i) {
          if (positive(q[i]) != positive(q[(i + 1) % 4])) es[k++] = edge_between(q[i], q[(i + 1) % 4]);
          if (positive(q[i])) ref = q[i];
        }
        segs.push_back({es[0], es[1], ref});
      } else if (crossings == 4) {
        for (int i = 0; i < 4; ++i)
          if (positive(q[i]))
            segs.push_back({edge_between(q[(i + 3) % 4], q[i]), edge_between(q[i], q[(i + 1) % 4]), q[i]});
      }
      for (auto [e1, e2, ref] : segs) {
        const Vec p = edge_mid(e1), r = edge_mid(e2);
        if (dotv(crossv(n, sub(r, p)), sub(corner_offset(ref), p)) < 0) std::swap(e1, e2);
        if (next[e1] != -1) throw std::logic_error("marching cubes table: inconsistent segment orientation");
        next[e1] = e2;
      }
    }

  CaseEntry entry;
  std::array<bool, 12> used{};
  for (int start = 0; start < 12; ++start) {
    if (next[start] == -1 || used[start]) continue;
    std::vector<int> loop;
    for (int e = start; !used[e]; e = next[e]) {
      if (next[e] == -1) throw std::logic_error("marching cubes table: open polygon");
      used[e] = true;
      loop.push_back(e);
    }
    // Fan from an apex whose diagonals leave the cube faces; a diagonal
    // lying in a face would be shared with the neighboring cell's polygon.
    const std::size_t n = loop.size();
    std::size_t apex = n;
    for (std::size_t s = 0; s < n && apex == n; ++s) {
      bool ok = true;
      for (std::size_t i = 2; i + 1 < n && ok; ++i) ok = !share_face(loop[s], loop[(s + i) % n]);
      if (ok) apex = s;
    }
    if (apex == n) throw std::logic_error("marching cubes table: no interior fan for polygon");
    for (std::size_t i = 1; i + 1 < n; ++i)
      entry.triangles.push_back({static_cast<std::uint8_t>(loop[apex]), static_cast<std::uint8_t>(loop[(apex + i) % n]),
                                 static_cast<std::uint8_t>(loop[(apex + i + 1) % n])});
    ++entry.loops;
  }
  return entry;
}

const std::array<CaseEntry, 256>& case_table() {
  static const std::array<CaseEntry, 256> table = [] {
    std::array<CaseEntry, 256> t;
    for (int m = 0; m < 256; ++m) t[m] = build_case(static_cast<std::uint8_t>(m));
    return t;
  }();
  return table;
}

}  // namespace

std::size_t marching_cubes_loop_count(std::uint8_t mask) { return case_table()[mask].loops; }

TriangleMesh marching_cubes(const GridField& field, double iso) {
  validate(field);
  if (!std::isfinite(iso)) throw ArgumentError("iso value must be finite");
  const auto& table = case_table();
  const std::size_t nx = field.dims[0], ny = field.dims[1], nz = field.dims[2];
  auto value = [&](std::size_t idx) {
    const double v = field.values[idx];
    return v == iso ? iso + 1e-12 : v;
  };

  TriangleMesh mesh;
  std::unordered_map<std::uint64_t, std::uint32_t> vertex_of_edge;
  auto vertex = [&](std::size_t i, std::size_t j, std::size_t k, int e) -> std::uint32_t {
    const Edge& edge = kEdges[e];
    const std::size_t ai = i + (edge.a & 1), aj = j + ((edge.a >> 1) & 1), ak = k + ((edge.a >> 2) & 1);
    const std::size_t a_idx = field.index(ai, aj, ak);
    const std::uint64_t key = static_cast<std::uint64_t>(a_idx) * 3 + static_cast<std::uint64_t>(edge.axis);
    if (auto it = vertex_of_edge.find(key); it != vertex_of_edge.end()) return it->second;
    const std::size_t bi = ai + (edge.axis == 0), bj = aj + (edge.axis == 1), bk = ak + (edge.axis == 2);
    const double va = value(a_idx), vb = value(field.index(bi, bj, bk));
    const double t = (iso - va) / (vb - va);
    const Point3 pa = field.node(ai, aj, ak), pb = field.node(bi, bj, bk);
    const auto id = static_cast<std::uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(pa + (pb - pa) * t);
    vertex_of_edge.emplace(key, id);
    return id;
  };

  for (std::size_t i = 0; i + 1 < nx; ++i)
    for (std::size_t j = 0; j + 1 < ny; ++j)
      for (std::size_t k = 0; k + 1 < nz; ++k) {
        std::uint8_t mask = 0;
        for (int c = 0; c < 8; ++c)
          if (value(field.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))) > iso) mask |= 1 << c;
        if (mask == 0 || mask == 255) continue;
        for (const auto& tri : table[mask].triangles) {
          const std::array<std::uint32_t, 3> t{vertex(i, j, k, tri[0]), vertex(i, j, k, tri[1]),
                                               vertex(i, j, k, tri[2])};
          const Point3 n = cross(mesh.vertices[t[1]] - mesh.vertices[t[0]], mesh.vertices[t[2]] - mesh.vertices[t[0]]);
          if (0.5 * norm(n) < 1e-12) continue;
          mesh.triangles.push_back(t);
        }
      }

  // Drop vertices that only belonged to skipped triangles.
  std::vector<std::uint32_t> remap(mesh.vertices.size(), UINT32_MAX);
  std::vector<Point3> used;
  for (auto& t : mesh.triangles)
    for (auto& v : t) {
      if (remap[v] == UINT32_MAX) {
        remap[v] = static_cast<std::uint32_t>(used.size());
        used.push_back(mesh.vertices[v]);
      }
      v = remap[v];
    }
  mesh.vertices = std::move(used);
  return mesh;
}

// ---------------------------------------------------------------------------
// Mesh measures

double triangle_area(const TriangleMesh& mesh, std::size_t t) {
  const auto& tri = mesh.triangles[t];
  const Point3 a = mesh.vertices[tri[0]], b = mesh.vertices[tri[1]], c = mesh.vertices[tri[2]];
  return 0.5 * norm(cross(b - a, c - a));
}

double mesh_area(const TriangleMesh& mesh) {
  double s = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) s += triangle_area(mesh, t);
  return s;
}

namespace {

std::map<std::pair<std::uint32_t, std::uint32_t>, int> edge_counts(const TriangleMesh& mesh) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> counts;
  for (const auto& t : mesh.triangles)
    for (int e = 0; e < 3; ++e) {
      std::uint32_t a = t[e], b = t[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      ++counts[{a, b}];
    }
  return counts;
}

}  // namespace

bool is_watertight(const TriangleMesh& mesh) {
  for (const auto& [edge, count] : edge_counts(mesh))
    if (count != 2) return false;
  return true;
}

long euler_characteristic(const TriangleMesh& mesh) {
  std::vector<bool> referenced(mesh.vertices.size(), false);
  for (const auto& t : mesh.triangles)
    for (auto v : t) referenced[v] = true;
  const long v = std::count(referenced.begin(), referenced.end(), true);
  const long e = static_cast<long>(edge_counts(mesh).size());
  const long f = static_cast<long>(mesh.triangles.size());
  return v - e + f;
}

double signed_volume(const TriangleMesh& mesh) {
  double s = 0.0;
  for (const auto& t : mesh.triangles)
    s += dot(mesh.vertices[t[0]], cross(mesh.vertices[t[1]], mesh.vertices[t[2]]));
  return s / 6.0;
}

// ---------------------------------------------------------------------------
// Files

void write_obj(const TriangleMesh& mesh, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write mesh '" + path.string() + "'");
  out << std::setprecision(17);
  for (const Point3& v : mesh.vertices) out << "v " << v.x << ' ' << v.y << ' ' << v.z << '\n';
  for (const auto& t : mesh.triangles) out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  if (!out) throw ArgumentError("failed writing mesh '" + path.string() + "'");
}

TriangleMesh read_obj(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open mesh '" + path.string() + "'");
  TriangleMesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (tag == "v") {
      Point3 p;
      if (!(ls >> p.x >> p.y >> p.z)) throw LoadError(where + ": malformed vertex");
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::array<std::uint32_t, 3> t{};
      for (auto& idx : t) {
        std::string tok;
        if (!(ls >> tok)) throw LoadError(where + ": face needs 3 indices");
        const long v = std::stol(tok.substr(0, tok.find('/')));
        if (v < 1) throw LoadError(where + ": face index must be positive");
        idx = static_cast<std::uint32_t>(v - 1);
      }
      std::string extra;
      if (ls >> extra) throw LoadError(where + ": only triangles are supported");
      mesh.triangles.push_back(t);
    }
  }
  for (const auto& t : mesh.triangles)
    for (auto v : t)
      if (v >= mesh.vertices.size()) throw LoadError(path.string() + ": face index out of range");
  return mesh;
}

void write_grid(const GridField& field, const fs::path& path) {
  validate(field);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write grid '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(field.dims.data()), sizeof(std::uint32_t) * 3);
  const double bounds[6] = {field.lo.x, field.lo.y, field.lo.z, field.hi.x, field.hi.y, field.hi.z};
  out.write(reinterpret_cast<const char*>(bounds), sizeof(bounds));
  out.write(reinterpret_cast<const char*>(field.values.data()),
            static_cast<std::streamsize>(field.values.size() * sizeof(double)));
  if (!out) throw ArgumentError("failed writing grid '" + path.string() + "'");
}

GridField read_grid(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open grid '" + path.string() + "'");
  GridField f;
  double bounds[6];
  if (!in.read(reinterpret_cast<char*>(f.dims.data()), sizeof(std::uint32_t) * 3) ||
      !in.read(reinterpret_cast<char*>(bounds), sizeof(bounds)))
    throw LoadError(path.string() + ": truncated grid header");
  const std::uint64_t n = std::uint64_t{f.dims[0]} * f.dims[1] * f.dims[2];
  if (n == 0 || n > (std::uint64_t{1} << 31)) throw LoadError(path.string() + ": implausible grid dimensions");
  f.lo = {bounds[0], bounds[1], bounds[2]};
  f.hi = {bounds[3], bounds[4], bounds[5]};
  f.values.resize(n);
  if (!in.read(reinterpret_cast<char*>(f.values.data()), static_cast<std::streamsize>(n * sizeof(double))))
    throw LoadError(path.string() + ": truncated grid values");
  try {
    validate(f);
  } catch (const Error& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return f;
}

}  // namespace gensdf
