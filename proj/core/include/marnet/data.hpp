#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marnet/pointops.hpp"
#include "marnet/random.hpp"

namespace marnet::data {

/// Points with unit normals and either a class id or per-point part ids.
struct PointCloud {
  PointSet points;
  int label = -1;
  std::vector<int> part_labels;

  std::size_t size() const { return points.size(); }
};

/// Throws DataError unless the cloud is non-empty, finite, has unit normals
/// (within 1e-4) and one part label per point when part labels are present.
void check_cloud(const PointCloud& cloud);

/// Lines of "x y z nx ny nz [part]"; commas are accepted as separators.
PointCloud read_xyzn(const std::filesystem::path& path);
void write_xyzn(const std::filesystem::path& path, const PointCloud& cloud);

struct Dataset {
  std::vector<std::string> class_names;
  // Part count of segmentation data, 0 for classification.
  std::size_t n_parts = 0;
  std::vector<PointCloud> clouds;
};

enum class Primitive { sphere, cube, cylinder, torus };

const std::vector<std::string>& shape_names();

/// Surface samples of one shape, randomly rotated and normalized. Points are
/// drawn in antipodal pairs, so the centroid is the origin.
PointCloud synth_shape(Primitive shape, std::size_t n_points, Rng& rng);

/// n_per_class clouds of each of sphere, cube, cylinder and torus.
Dataset synth_shapes(std::size_t n_per_class, std::size_t n_points, std::uint64_t seed);

enum class SegTask {
  hemisphere,  // spheres; part 1 where world z > 0
  torus,       // tori; part 1 on the inner half (distance to axis < R)
};

Dataset synth_segmentation(SegTask task, std::size_t n_clouds, std::size_t n_points, std::uint64_t seed);

struct AugmentParams {
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 shift{0.0, 0.0, 0.0};
};

inline constexpr double kScaleLow = 0.66;
inline constexpr double kScaleHigh = 1.5;
inline constexpr double kShift = 0.2;

/// Per-axis scale in [0.66, 1.5] then per-axis shift in [-0.2, 0.2].
AugmentParams draw_augment(Rng& rng);
/// Scale then translate; normals become normalize(n / s).
PointCloud apply_augment(const PointCloud& cloud, const AugmentParams& params);
PointCloud augment(const PointCloud& cloud, Rng& rng);

enum class SamplePolicy { uniform, fps };

/// m points without replacement; labels and normals follow their points.
/// The FPS policy starts at the lexicographically smallest point.
PointCloud sample_points(const PointCloud& cloud, std::size_t m, SamplePolicy policy, Rng* rng = nullptr);

/// Appends n points uniform in [-1, 1]^3 with random unit normals. Part
/// labels of added points copy the nearest original point.
PointCloud inject_noise(const PointCloud& cloud, std::size_t n, Rng& rng);

/// Centroid to the origin, maximum norm to 1; normals and labels untouched.
PointCloud normalize_cloud(const PointCloud& cloud);

struct ManifestEntry {
  std::string path;
  int label = -1;
};

struct DatasetManifest {
  // Entry paths are relative to root (or absolute).
  std::string root;
  std::string split;
  std::vector<std::string> class_names;
  std::size_t n_parts = 0;
  std::vector<ManifestEntry> entries;
};

/// root/<class>/<split>/*.xyzn (or *.txt), class table sorted by name.
DatasetManifest import_modelnet(const std::filesystem::path& root, const std::string& split);

/// root/<category>/<split>/*.xyzn with a part label column. The part count
/// is one more than the largest label found.
DatasetManifest import_partnet(const std::filesystem::path& root, const std::string& category,
                               const std::string& split);

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Reads and normalizes every entry.
Dataset load_dataset(const DatasetManifest& manifest);

/// Writes clouds as <dir>/<class>/<split>/<index>.xyzn and returns the
/// matching manifest.
DatasetManifest write_dataset(const Dataset& dataset, const std::filesystem::path& dir, const std::string& split);

}  // namespace marnet::data
