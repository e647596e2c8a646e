#include "gensdf/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "gensdf/errors.hpp"

namespace gensdf {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string lowercase_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

}  // namespace

PointCloud read_xyz(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open point cloud '" + path.string() + "'");
  std::vector<Point3> points;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    Point3 p;
    if (!(ls >> p.x >> p.y >> p.z))
      throw LoadError(path.string() + ":" + std::to_string(line_no) + ": expected 'x y z'");
    points.push_back(p);
  }
  if (points.empty()) throw LoadError("point cloud '" + path.string() + "' is empty");
  try {
    return PointCloud(std::move(points));
  } catch (const ArgumentError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void write_xyz(const PointCloud& cloud, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write point cloud '" + path.string() + "'");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const Point3& p : cloud) out << p.x << ' ' << p.y << ' ' << p.z << '\n';
  if (!out) throw ArgumentError("failed writing '" + path.string() + "'");
}

PointCloud read_pcb(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open point cloud '" + path.string() + "'");
  std::uint64_t count = 0;
  if (!in.read(reinterpret_cast<char*>(&count), sizeof(count))) throw LoadError(path.string() + ": missing header");
  if (count == 0) throw LoadError(path.string() + ": empty point cloud");
  std::vector<float> raw(count * 3);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float))))
    throw LoadError(path.string() + ": truncated point data");
  std::vector<Point3> points;
  points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) points.push_back({raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]});
  try {
    return PointCloud(std::move(points));
  } catch (const ArgumentError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void write_pcb(const PointCloud& cloud, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write point cloud '" + path.string() + "'");
  const std::uint64_t count = cloud.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const Point3& p : cloud) {
    const float v[3] = {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)};
    out.write(reinterpret_cast<const char*>(v), sizeof(v));
  }
  if (!out) throw ArgumentError("failed writing '" + path.string() + "'");
}

PointCloud load_point_cloud(const fs::path& path) {
  const std::string ext = lowercase_extension(path);
  if (ext == ".xyz") return read_xyz(path);
  if (ext == ".pcb") return read_pcb(path);
  throw LoadError("unsupported point cloud extension '" + ext + "' (expected .xyz or .pcb)");
}

void save_point_cloud(const PointCloud& cloud, const fs::path& path) {
  const std::string ext = lowercase_extension(path);
  if (ext == ".xyz") return write_xyz(cloud, path);
  if (ext == ".pcb") return write_pcb(cloud, path);
  throw ArgumentError("unsupported point cloud extension '" + ext + "' (expected .xyz or .pcb)");
}

std::string_view to_string(DatasetSplit split) {
  switch (split) {
    case DatasetSplit::labeled: return "labeled";
    case DatasetSplit::unlabeled: return "unlabeled";
    case DatasetSplit::test: return "test";
  }
  return "unknown";
}

DatasetSplit parse_dataset_split(std::string_view name) {
  for (DatasetSplit s : {DatasetSplit::labeled, DatasetSplit::unlabeled, DatasetSplit::test})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown dataset split '" + std::string(name) + "'");
}

void to_json(nlohmann::json& j, const ShapeInstance& shape) {
  j = nlohmann::json{{"family", std::string(to_string(shape.family))},
                     {"parameters", shape.parameters},
                     {"pose",
                      {{"translation", {shape.pose.translation.x, shape.pose.translation.y, shape.pose.translation.z}},
                       {"scale", shape.pose.scale}}},
                     {"category_id", shape.category_id}};
  if (!shape.parts.empty()) j["parts"] = shape.parts;
  if (shape.approximate_sdf()) j["approximate_sdf"] = true;
}

void from_json(const nlohmann::json& j, ShapeInstance& shape) {
  try {
    shape.family = parse_shape_family(j.at("family").get<std::string>());
    shape.parameters = j.value("parameters", std::vector<double>{});
    shape.pose = Pose{};
    if (j.contains("pose")) {
      const auto& pose = j.at("pose");
      if (pose.contains("translation")) {
        const auto t = pose.at("translation").get<std::vector<double>>();
        if (t.size() != 3) throw ConfigError("pose.translation must have 3 components");
        shape.pose.translation = {t[0], t[1], t[2]};
      }
      shape.pose.scale = pose.value("scale", 1.0);
    }
    shape.category_id = j.value("category_id", std::string(to_string(shape.family)));
    shape.parts.clear();
    if (j.contains("parts")) shape.parts = j.at("parts").get<std::vector<ShapeInstance>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed shape entry: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const ShapeManifest& manifest) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::json je = e.shape;
    je["id"] = e.id;
    je["split"] = std::string(to_string(e.split));
    if (!e.cloud_path.empty()) je["cloud"] = e.cloud_path;
    entries.push_back(std::move(je));
  }
  j = nlohmann::json{{"format", "gensdf-manifest"},
                     {"version", 1},
                     {"seed", manifest.seed},
                     {"cloud_size", manifest.cloud_size},
                     {"instances", std::move(entries)}};
}

void from_json(const nlohmann::json& j, ShapeManifest& manifest) {
  try {
    manifest.seed = j.value("seed", std::uint64_t{0});
    manifest.cloud_size = j.value("cloud_size", std::size_t{0});
    manifest.entries.clear();
    for (const auto& je : j.at("instances")) {
      ManifestEntry e;
      e.shape = je.get<ShapeInstance>();
      e.id = je.value("id", std::string{});
      e.split = parse_dataset_split(je.value("split", std::string("labeled")));
      e.cloud_path = je.value("cloud", std::string{});
      manifest.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
}

void check_split_disjointness(const ShapeManifest& manifest) {
  std::map<std::string, std::set<DatasetSplit>> splits_of;
  for (const auto& e : manifest.entries) splits_of[e.shape.category_id].insert(e.split);
  for (const auto& [category, splits] : splits_of)
    if (splits.size() > 1)
      throw DatasetError("category '" + category + "' appears in more than one dataset split");
}

ShapeManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  ShapeManifest manifest = j.get<ShapeManifest>();
  for (const auto& e : manifest.entries) validate(e.shape);
  check_split_disjointness(manifest);
  return manifest;
}

void save_manifest(const ShapeManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write manifest '" + path.string() + "'");
  out << nlohmann::json(manifest).dump(2) << '\n';
}

std::string hash_string(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return hash_string(buffer.str());
}

}  // namespace gensdf
