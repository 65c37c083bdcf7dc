#include "marnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "marnet/errors.hpp"

namespace marnet::data {

namespace fs = std::filesystem;

namespace {

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec3 unit(const Vec3& v) {
  const double n = norm(v);
  if (!(n > 0.0)) throw DataError("cannot normalize a zero vector");
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    if (norm(v) > 1e-12) return unit(v);
  }
}

using Mat3 = std::array<Vec3, 3>;

// Uniform rotation from a random unit quaternion.
Mat3 random_rotation(Rng& rng) {
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& v : q) {
      v = rng.normal();
      n += v * v;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
  return {Vec3{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
          Vec3{2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
          Vec3{2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
}

Vec3 rotate(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

constexpr double kPi = 3.14159265358979323846;
constexpr double kTorusR = 1.0;
constexpr double kTorusTube = 0.35;

struct Sample {
  Vec3 p, n;
  int part = 0;  // torus: 1 on the inner half
};

// One surface sample in the object frame.
Sample draw(Primitive shape, Rng& rng) {
  switch (shape) {
    case Primitive::sphere: {
      const Vec3 v = random_unit(rng);
      return {v, v};
    }
    case Primitive::cube: {
      const auto face = rng.index(6);
      const auto axis = static_cast<int>(face / 2);
      const double sign = face % 2 == 0 ? 1.0 : -1.0;
      Vec3 p{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      Vec3 n{0.0, 0.0, 0.0};
      p[axis] = sign;
      n[axis] = sign;
      return {p, n};
    }
    case Primitive::cylinder: {
      // Radius 1, height 2: side area 4 pi, caps 2 pi together.
      const double t = rng.uniform(0.0, 2.0 * kPi);
      if (rng.uniform() < 2.0 / 3.0) {
        const Vec3 n{std::cos(t), std::sin(t), 0.0};
        return {Vec3{n[0], n[1], rng.uniform(-1.0, 1.0)}, n};
      }
      const double r = std::sqrt(rng.uniform());
      const double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
      return {Vec3{r * std::cos(t), r * std::sin(t), sign}, Vec3{0.0, 0.0, sign}};
    }
    case Primitive::torus: {
      const double u = rng.uniform(0.0, 2.0 * kPi);
      double v = 0.0;
      // Area element is proportional to R + r cos v.
      do {
        v = rng.uniform(0.0, 2.0 * kPi);
      } while (rng.uniform() * (kTorusR + kTorusTube) > kTorusR + kTorusTube * std::cos(v));
      const Vec3 n{std::cos(v) * std::cos(u), std::cos(v) * std::sin(u), std::sin(v)};
      const double ring = kTorusR + kTorusTube * std::cos(v);
      return {Vec3{ring * std::cos(u), ring * std::sin(u), kTorusTube * std::sin(v)}, n, ring < kTorusR ? 1 : 0};
    }
  }
  throw DataError("unknown shape");
}

std::vector<std::string> split_fields(const std::string& line) {
  std::string s = line;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

double parse_double(const std::string& tok, const fs::path& path, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size() || !std::isfinite(v)) {
    throw DataError(path.string() + ":" + std::to_string(line) + ": bad number '" + tok + "'");
  }
  return v;
}

}  // namespace

void check_cloud(const PointCloud& c) {
  if (c.size() == 0) throw DataError("cloud has no points");
  if (c.points.normals.size() != c.size()) throw DataError("cloud needs one normal per point");
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      if (!std::isfinite(c.points.positions[i][a]) || !std::isfinite(c.points.normals[i][a])) {
        throw DataError("non-finite coordinate at point " + std::to_string(i));
      }
    }
    if (std::abs(norm(c.points.normals[i]) - 1.0) > 1e-4) {
      throw DataError("normal of point " + std::to_string(i) + " is not unit length");
    }
  }
  if (!c.part_labels.empty() && c.part_labels.size() != c.size()) {
    throw DataError("cloud has " + std::to_string(c.part_labels.size()) + " part labels for " +
                    std::to_string(c.size()) + " points");
  }
}

PointCloud read_xyzn(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  PointCloud c;
  std::string line;
  std::size_t lineno = 0, columns = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto f = split_fields(line);
    if (f.empty()) continue;
    if (f.size() != 6 && f.size() != 7) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 6 or 7 fields, got " +
                      std::to_string(f.size()));
    }
    if (columns == 0) columns = f.size();
    if (f.size() != columns) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": column count changed from " +
                      std::to_string(columns));
    }
    Vec3 p, n;
    for (int a = 0; a < 3; ++a) {
      p[a] = parse_double(f[a], path, lineno);
      n[a] = parse_double(f[3 + a], path, lineno);
    }
    c.points.positions.push_back(p);
    c.points.normals.push_back(n);
    if (columns == 7) {
      const double v = parse_double(f[6], path, lineno);
      if (v < 0 || v != std::floor(v)) {
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": part label must be a non-negative integer");
      }
      c.part_labels.push_back(static_cast<int>(v));
    }
  }
  if (c.size() == 0) throw DataError(path.string() + ": no points");
  return c;
}

void write_xyzn(const fs::path& path, const PointCloud& c) {
  if (!c.part_labels.empty() && c.part_labels.size() != c.size()) {
    throw DataError("write_xyzn: part label count does not match the points");
  }
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (f == nullptr) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& p = c.points.positions[i];
    const Vec3 n = c.points.has_normals() ? c.points.normals[i] : Vec3{0.0, 0.0, 0.0};
    std::fprintf(f, "%.6g %.6g %.6g %.6g %.6g %.6g", p[0], p[1], p[2], n[0], n[1], n[2]);
    if (!c.part_labels.empty()) std::fprintf(f, " %d", c.part_labels[i]);
    std::fputc('\n', f);
  }
  if (std::fclose(f) != 0) throw DataError("error while writing " + path.string());
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"sphere", "cube", "cylinder", "torus"};
  return names;
}

PointCloud synth_shape(Primitive shape, std::size_t n_points, Rng& rng) {
  if (n_points < 2) throw DataError("synth_shape: needs at least 2 points");
  const Mat3 rot = random_rotation(rng);
  PointCloud c;
  auto push = [&](const Sample& s, double sign) {
    const Vec3 p{sign * s.p[0], sign * s.p[1], sign * s.p[2]};
    const Vec3 n{sign * s.n[0], sign * s.n[1], sign * s.n[2]};
    c.points.positions.push_back(rotate(rot, p));
    c.points.normals.push_back(unit(rotate(rot, n)));
    c.part_labels.push_back(s.part);
  };
  for (std::size_t i = 0; i + 1 < n_points; i += 2) {
    const Sample s = draw(shape, rng);
    push(s, 1.0);
    push(s, -1.0);
  }
  if (n_points % 2 == 1) push(draw(shape, rng), 1.0);
  c = normalize_cloud(c);
  if (shape != Primitive::torus) c.part_labels.clear();
  c.label = static_cast<int>(shape);
  return c;
}

Dataset synth_shapes(std::size_t n_per_class, std::size_t n_points, std::uint64_t seed) {
  Dataset d;
  d.class_names = shape_names();
  Rng rng(seed);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (int s = 0; s < 4; ++s) {
      auto c = synth_shape(static_cast<Primitive>(s), n_points, rng);
      c.part_labels.clear();
      d.clouds.push_back(std::move(c));
    }
  }
  return d;
}

Dataset synth_segmentation(SegTask task, std::size_t n_clouds, std::size_t n_points, std::uint64_t seed) {
  Dataset d;
  d.n_parts = 2;
  Rng rng(seed);
  if (task == SegTask::hemisphere) {
    d.class_names = {"sphere"};
    for (std::size_t i = 0; i < n_clouds; ++i) {
      auto c = synth_shape(Primitive::sphere, n_points, rng);
      c.label = 0;
      c.part_labels.resize(c.size());
      for (std::size_t j = 0; j < c.size(); ++j) c.part_labels[j] = c.points.positions[j][2] > 0.0 ? 1 : 0;
      d.clouds.push_back(std::move(c));
    }
  } else {
    d.class_names = {"torus"};
    for (std::size_t i = 0; i < n_clouds; ++i) {
      auto c = synth_shape(Primitive::torus, n_points, rng);
      c.label = 0;
      d.clouds.push_back(std::move(c));
    }
  }
  return d;
}

AugmentParams draw_augment(Rng& rng) {
  AugmentParams a;
  for (auto& s : a.scale) s = rng.uniform(kScaleLow, kScaleHigh);
  for (auto& t : a.shift) t = rng.uniform(-kShift, kShift);
  return a;
}

PointCloud apply_augment(const PointCloud& cloud, const AugmentParams& a) {
  for (double s : a.scale)
    if (!(s > 0.0)) throw DataError("augment: scale factors must be positive");
  PointCloud out = cloud;
  for (auto& p : out.points.positions)
    for (int i = 0; i < 3; ++i) p[i] = p[i] * a.scale[i] + a.shift[i];
  for (auto& n : out.points.normals) n = unit(Vec3{n[0] / a.scale[0], n[1] / a.scale[1], n[2] / a.scale[2]});
  return out;
}

PointCloud augment(const PointCloud& cloud, Rng& rng) { return apply_augment(cloud, draw_augment(rng)); }

namespace {

PointCloud take(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.label = cloud.label;
  out.points = select(cloud.points, idx);
  if (!cloud.part_labels.empty()) {
    out.part_labels.reserve(idx.size());
    for (auto i : idx) out.part_labels.push_back(cloud.part_labels.at(i));
  }
  return out;
}

}  // namespace

PointCloud sample_points(const PointCloud& cloud, std::size_t m, SamplePolicy policy, Rng* rng) {
  const std::size_t n = cloud.size();
  if (m < 1 || m > n) {
    throw ShapeError("sample_points: cannot take " + std::to_string(m) + " of " + std::to_string(n) + " points");
  }
  if (policy == SamplePolicy::fps) return take(cloud, pointops::farthest_point_sample(cloud.points, m));
  if (rng == nullptr) throw Error("sample_points: uniform sampling needs an rng");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng->index(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  return take(cloud, idx);
}

PointCloud inject_noise(const PointCloud& cloud, std::size_t n, Rng& rng) {
  PointCloud out = cloud;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    out.points.positions.push_back(p);
    out.points.normals.push_back(random_unit(rng));
    if (!cloud.part_labels.empty()) {
      std::size_t best = 0;
      double best_d = squared_distance(cloud.points.positions[0], p);
      for (std::size_t j = 1; j < cloud.size(); ++j) {
        const double d = squared_distance(cloud.points.positions[j], p);
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      out.part_labels.push_back(cloud.part_labels[best]);
    }
  }
  return out;
}

PointCloud normalize_cloud(const PointCloud& cloud) {
  PointCloud out = cloud;
  out.points = pointops::normalize(cloud.points);
  return out;
}

// ---------------------------------------------------------------------------
// Importers and manifests

namespace {

std::vector<fs::path> point_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".xyzn" || ext == ".txt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<std::string> subdirectories(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError(root.string() + " is not a directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

DatasetManifest import_modelnet(const fs::path& root, const std::string& split) {
  DatasetManifest m;
  m.root = root.string();
  m.split = split;
  m.class_names = subdirectories(root);
  if (m.class_names.empty()) throw DataError(root.string() + ": no class directories");
  for (std::size_t c = 0; c < m.class_names.size(); ++c) {
    const fs::path dir = root / m.class_names[c] / split;
    if (!fs::is_directory(dir)) throw DataError("class " + m.class_names[c] + " has no '" + split + "' split");
    for (const auto& f : point_files(dir)) {
      m.entries.push_back({fs::relative(f, root).generic_string(), static_cast<int>(c)});
    }
  }
  if (m.entries.empty()) throw DataError(root.string() + ": split '" + split + "' has no point files");
  return m;
}

DatasetManifest import_partnet(const fs::path& root, const std::string& category, const std::string& split) {
  const fs::path dir = root / category / split;
  if (!fs::is_directory(root / category)) throw DataError(root.string() + ": no category '" + category + "'");
  if (!fs::is_directory(dir)) throw DataError("category " + category + " has no '" + split + "' split");
  DatasetManifest m;
  m.root = root.string();
  m.split = split;
  m.class_names = {category};
  int max_label = -1;
  for (const auto& f : point_files(dir)) {
    const auto cloud = read_xyzn(f);
    if (cloud.part_labels.empty()) throw DataError(f.string() + ": missing part label column");
    max_label = std::max(max_label, *std::max_element(cloud.part_labels.begin(), cloud.part_labels.end()));
    m.entries.push_back({fs::relative(f, root).generic_string(), 0});
  }
  if (m.entries.empty()) throw DataError(dir.string() + ": no point files");
  m.n_parts = static_cast<std::size_t>(max_label + 1);
  return m;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["root"] = m.root;
  j["split"] = m.split;
  j["class_names"] = m.class_names;
  j["n_parts"] = m.n_parts;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) j["entries"].push_back({{"path", e.path}, {"label", e.label}});
  return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.root = j.value("root", std::string());
    m.split = j.at("split").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.n_parts = j.value("n_parts", std::size_t{0});
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry{e.at("path").get<std::string>(), e.at("label").get<int>()};
      if (entry.label < 0 || static_cast<std::size_t>(entry.label) >= m.class_names.size()) {
        throw DataError("manifest entry " + entry.path + ": label outside the class table");
      }
      m.entries.push_back(std::move(entry));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  auto m = manifest_from_json(j);
  if (m.root.empty()) m.root = path.parent_path().string();
  return m;
}

Dataset load_dataset(const DatasetManifest& m) {
  Dataset d;
  d.class_names = m.class_names;
  d.n_parts = m.n_parts;
  for (const auto& e : m.entries) {
    const fs::path p = fs::path(e.path).is_absolute() ? fs::path(e.path) : fs::path(m.root) / e.path;
    auto c = normalize_cloud(read_xyzn(p));
    c.label = e.label;
    if (m.n_parts > 0) {
      if (c.part_labels.empty()) throw DataError(p.string() + ": missing part labels");
      for (int l : c.part_labels)
        if (static_cast<std::size_t>(l) >= m.n_parts) throw DataError(p.string() + ": part label out of range");
    } else {
      c.part_labels.clear();
    }
    d.clouds.push_back(std::move(c));
  }
  return d;
}

DatasetManifest write_dataset(const Dataset& d, const fs::path& dir, const std::string& split) {
  DatasetManifest m;
  m.root = dir.string();
  m.split = split;
  m.class_names = d.class_names;
  m.n_parts = d.n_parts;
  std::vector<std::size_t> counter(d.class_names.size(), 0);
  for (const auto& c : d.clouds) {
    if (c.label < 0 || static_cast<std::size_t>(c.label) >= d.class_names.size()) {
      throw DataError("write_dataset: cloud label outside the class table");
    }
    const fs::path sub = fs::path(d.class_names[c.label]) / split;
    fs::create_directories(dir / sub);
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.xyzn", counter[c.label]++);
    write_xyzn(dir / sub / name, c);
    m.entries.push_back({(sub / name).generic_string(), c.label});
  }
  return m;
}

}  // namespace marnet::data
