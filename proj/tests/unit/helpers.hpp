#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "marnet/pointops.hpp"
#include "marnet/random.hpp"
#include "marnet/tensor.hpp"

namespace marnet::test {

inline Vec3 unit(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

/// Points uniform in [-1, 1]^3 with random unit normals.
inline PointSet random_points(std::size_t n, Rng& rng) {
  PointSet p;
  for (std::size_t i = 0; i < n; ++i) {
    p.positions.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
    p.normals.push_back(unit({rng.normal(), rng.normal(), rng.normal()}));
  }
  return p;
}

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace marnet::test
