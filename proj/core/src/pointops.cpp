#include "marnet/pointops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "marnet/ops.hpp"

namespace marnet {

PointSet select(const PointSet& pts, const std::vector<std::size_t>& indices) {
  PointSet out;
  out.positions.reserve(indices.size());
  for (auto i : indices) out.positions.push_back(pts.positions.at(i));
  if (pts.has_normals()) {
    out.normals.reserve(indices.size());
    for (auto i : indices) out.normals.push_back(pts.normals.at(i));
  }
  return out;
}

namespace pointops {

std::vector<std::size_t> farthest_point_sample(const PointSet& pts, std::size_t m, FpsStart start) {
  const std::size_t n = pts.size();
  if (m < 1 || m > n) {
    throw ShapeError("farthest_point_sample: cannot pick " + std::to_string(m) + " of " +
                     std::to_string(n) + " points");
  }
  std::size_t first = 0;
  switch (start.policy) {
    case StartPolicy::lexicographic:
      for (std::size_t i = 1; i < n; ++i)
        if (pts.positions[i] < pts.positions[first]) first = i;
      break;
    case StartPolicy::random:
      if (start.rng == nullptr) throw Error("farthest_point_sample: random start needs an rng");
      first = static_cast<std::size_t>(start.rng->index(n));
      break;
    case StartPolicy::first:
      break;
  }
  std::vector<std::size_t> picked;
  picked.reserve(m);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t current = first;
  for (std::size_t t = 0; t < m; ++t) {
    picked.push_back(current);
    taken[current] = 1;
    if (t + 1 == m) break;
    const Vec3& p = pts.positions[current];
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], squared_distance(pts.positions[i], p));
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return picked;
}

std::vector<NeighborGroup> ball_query(const PointSet& src, const PointSet& centers, double radius,
                                      std::size_t samples) {
  if (src.size() == 0) throw ShapeError("ball_query: empty source set");
  if (!(radius > 0.0) || samples < 1) throw ConfigError("ball_query: needs radius > 0 and samples >= 1");
  std::vector<NeighborGroup> groups(centers.size());
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const Vec3& center = centers.positions[c];
    auto& g = groups[c];
    g.center_index = c;
    g.members.reserve(samples);
    for (std::size_t i = 0; i < src.size() && g.members.size() < samples; ++i) {
      if (std::sqrt(squared_distance(src.positions[i], center)) <= radius) g.members.push_back(i);
    }
    if (g.members.empty()) {
      std::size_t nearest = 0;
      double best = squared_distance(src.positions[0], center);
      for (std::size_t i = 1; i < src.size(); ++i) {
        const double d = squared_distance(src.positions[i], center);
        if (d < best) {
          best = d;
          nearest = i;
        }
      }
      g.members.push_back(nearest);
      g.nearest_fallback = true;
    }
    g.members.resize(samples, g.members.front());
  }
  return groups;
}

KnnResult knn(const PointSet& src, const PointSet& queries, std::size_t k) {
  const std::size_t n = src.size();
  if (k < 1 || k > n) {
    throw ShapeError("knn: k = " + std::to_string(k) + " with " + std::to_string(n) + " source points");
  }
  KnnResult r;
  r.k = k;
  r.indices.reserve(queries.size() * k);
  r.distances.reserve(queries.size() * k);
  std::vector<std::pair<double, std::size_t>> cand(n);
  for (const auto& q : queries.positions) {
    for (std::size_t i = 0; i < n; ++i) cand[i] = {squared_distance(src.positions[i], q), i};
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t j = 0; j < k; ++j) {
      r.indices.push_back(cand[j].second);
      r.distances.push_back(std::sqrt(cand[j].first));
    }
  }
  return r;
}

InterpolationWeights three_nn_weights(const PointSet& coarse, const PointSet& fine) {
  if (coarse.size() == 0) throw ShapeError("three_nn_interpolate: no coarse points");
  const std::size_t k = std::min<std::size_t>(3, coarse.size());
  auto nn = knn(coarse, fine, k);
  InterpolationWeights w;
  w.per_point = k;
  w.indices = std::move(nn.indices);
  w.weights.resize(w.indices.size());
  for (std::size_t f = 0; f < fine.size(); ++f) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double d = nn.distances[f * k + j];
      const double inv = 1.0 / (d * d + kInterpolationEps);
      w.weights[f * k + j] = inv;
      total += inv;
    }
    for (std::size_t j = 0; j < k; ++j) w.weights[f * k + j] /= total;
  }
  return w;
}

template <class T>
Var<T> three_nn_interpolate(const PointSet& coarse, const Var<T>& coarse_feats, const PointSet& fine) {
  if (coarse_feats.rows() != coarse.size()) {
    throw ShapeError("three_nn_interpolate: " + std::to_string(coarse_feats.rows()) +
                     " feature rows for " + std::to_string(coarse.size()) + " coarse points");
  }
  auto w = three_nn_weights(coarse, fine);
  std::vector<T> weights(w.weights.begin(), w.weights.end());
  return weighted_gather<T>(coarse_feats, w.indices, weights, w.per_point);
}

template Var<float> three_nn_interpolate<float>(const PointSet&, const Var<float>&, const PointSet&);
template Var<double> three_nn_interpolate<double>(const PointSet&, const Var<double>&, const PointSet&);

PointSet normalize(const PointSet& pts) {
  PointSet out = pts;
  if (pts.size() == 0) return out;
  Vec3 c{0.0, 0.0, 0.0};
  for (const auto& p : pts.positions)
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  for (int a = 0; a < 3; ++a) c[a] /= static_cast<double>(pts.size());
  double max_norm = 0.0;
  for (auto& p : out.positions) {
    for (int a = 0; a < 3; ++a) p[a] -= c[a];
    max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  if (max_norm > 0.0) {
    for (auto& p : out.positions)
      for (int a = 0; a < 3; ++a) p[a] /= max_norm;
  } else {
    for (auto& p : out.positions) p = Vec3{0.0, 0.0, 0.0};
  }
  return out;
}

}  // namespace pointops
}  // namespace marnet
