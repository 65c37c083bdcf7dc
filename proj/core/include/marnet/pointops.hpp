#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "marnet/random.hpp"
#include "marnet/tensor.hpp"

namespace marnet {

using Vec3 = std::array<double, 3>;

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Positions of one point set, with optional per-point unit normals
/// (empty, or one per position).
struct PointSet {
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;

  std::size_t size() const { return positions.size(); }
  bool has_normals() const { return !normals.empty(); }
};

/// Subset of a point set by index, normals carried along.
PointSet select(const PointSet& pts, const std::vector<std::size_t>& indices);

namespace pointops {

enum class StartPolicy {
  lexicographic,  // smallest (x, y, z); permutation invariant
  random,         // seeded draw
  first,          // index 0
};

struct FpsStart {
  StartPolicy policy = StartPolicy::lexicographic;
  Rng* rng = nullptr;  // required for StartPolicy::random
};

/// Greedy farthest point sampling. Each pick maximizes the minimum distance
/// to the picks so far; ties go to the lowest candidate index.
std::vector<std::size_t> farthest_point_sample(const PointSet& pts, std::size_t m,
                                               FpsStart start = {});

struct NeighborGroup {
  std::size_t center_index = 0;
  std::vector<std::size_t> members;
  // True when the ball was empty and the nearest source point was used.
  bool nearest_fallback = false;
};

/// Up to `samples` source indices within `radius` of each center, ascending
/// by source index; short groups repeat the first found index.
std::vector<NeighborGroup> ball_query(const PointSet& src, const PointSet& centers, double radius,
                                      std::size_t samples);

struct KnnResult {
  std::vector<std::size_t> indices;  // queries x k
  std::vector<double> distances;     // Euclidean, same layout
  std::size_t k = 0;
};

/// k nearest sources per query, ascending distance, ties by lowest index.
KnnResult knn(const PointSet& src, const PointSet& queries, std::size_t k);

inline constexpr double kInterpolationEps = 1e-8;

struct InterpolationWeights {
  std::vector<std::size_t> indices;  // fine x per_point
  std::vector<double> weights;       // normalized inverse squared distance
  std::size_t per_point = 0;
};

/// Neighbors and weights that carry coarse features to fine points:
/// w_i proportional to 1 / (d_i^2 + eps) over the 3 (or all, if fewer)
/// nearest coarse points.
InterpolationWeights three_nn_weights(const PointSet& coarse, const PointSet& fine);

/// Inverse-distance interpolation of coarse features [N_c, D] to fine
/// points; differentiable with respect to the features.
template <class T>
Var<T> three_nn_interpolate(const PointSet& coarse, const Var<T>& coarse_feats, const PointSet& fine);

/// Centroid to the origin and maximum norm to 1. Normals are untouched.
PointSet normalize(const PointSet& pts);

}  // namespace pointops
}  // namespace marnet
