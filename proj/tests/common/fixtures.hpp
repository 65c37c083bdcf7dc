#pragma once

// Layer specs, random inputs and per-layer gradient checks shared by the
// unit tests and the acceptance suite.

#include <cstddef>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "marnet/grad_check.hpp"
#include "marnet/layers.hpp"
#include "marnet/model.hpp"
#include "marnet/ops.hpp"
#include "marnet/pointops.hpp"

namespace marnet::fixture {

inline Vec3 unit(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline PointSet cloud(std::size_t n, Rng& rng) {
  PointSet p;
  for (std::size_t i = 0; i < n; ++i) {
    p.positions.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
    p.normals.push_back(unit({rng.normal(), rng.normal(), rng.normal()}));
  }
  return p;
}

inline std::vector<PointSet> clouds(std::size_t batch, std::size_t n, Rng& rng) {
  std::vector<PointSet> out;
  for (std::size_t b = 0; b < batch; ++b) out.push_back(cloud(n, rng));
  return out;
}

template <class T>
Tensor<T> uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
nn::LevelState<T> level(nn::Stage stage, int index, std::vector<PointSet> pts, std::optional<Var<T>> feats) {
  nn::LevelState<T> s;
  s.stage = stage;
  s.level = index;
  s.clouds = std::move(pts);
  s.feats = std::move(feats);
  return s;
}

/// Level with random features of the given width on the given clouds.
template <class T>
nn::LevelState<T> random_level(nn::Stage stage, int index, std::vector<PointSet> pts, std::size_t width, Rng& rng,
                               bool trainable = false) {
  const std::size_t rows = pts.size() * pts.front().size();
  auto t = uniform<T>({rows, width}, rng);
  return level<T>(stage, index, std::move(pts), trainable ? parameter(std::move(t)) : constant(std::move(t)));
}

inline nn::LayerSpec sa_spec(std::string name, std::size_t in, std::vector<double> radii,
                             std::vector<std::size_t> samples, std::vector<std::vector<std::size_t>> mlp,
                             std::size_t groups, std::size_t out_points) {
  nn::LayerSpec s;
  s.name = std::move(name);
  s.kind = nn::LayerKind::set_abstraction;
  s.in_channels = {in};
  s.radii = std::move(radii);
  s.samples = std::move(samples);
  s.mlp = std::move(mlp);
  s.n_groups = groups;
  s.out_points = s.radii.empty() ? 1 : out_points;
  return s;
}

inline nn::LayerSpec stage_spec(std::string name, nn::LayerKind kind, std::vector<std::size_t> in,
                                std::vector<std::size_t> widths, std::size_t groups, double radius = 0.0,
                                std::size_t samples = 0) {
  nn::LayerSpec s;
  s.name = std::move(name);
  s.kind = kind;
  s.in_channels = std::move(in);
  s.mlp = {std::move(widths)};
  s.n_groups = groups;
  if (radius > 0.0) {
    s.radii = {radius};
    s.samples = {samples};
  }
  return s;
}

inline nn::LayerSpec fc_spec(std::string name, std::size_t in, std::size_t out, double dropout, bool final) {
  auto s = stage_spec(std::move(name), nn::LayerKind::fully_connected, {in}, {out}, 1);
  s.dropout = dropout;
  s.final = final;
  return s;
}

/// Sets every learnable scalar of `layer` to zero.
template <class T, class Layer>
void zero_parameters_of(const Layer& layer) {
  std::vector<nn::NamedParameter<T>> params;
  layer.collect(params);
  for (auto& p : params)
    for (auto& v : p.var.value().data()) v = T{0};
}

template <class T>
std::vector<Var<T>> leaves_of(const std::vector<nn::NamedParameter<T>>& params) {
  std::vector<Var<T>> out;
  for (const auto& p : params) out.push_back(p.var);
  return out;
}

/// Options for checks through max pooling, ReLU and batch norm.
inline GradCheckOptions layer_check_options() {
  GradCheckOptions o;
  o.metric = GradCheckMetric::tensor;
  o.zero_tolerance = 1e-7;
  o.skip_kinks = true;
  o.max_kink_fraction = 0.1;
  return o;
}

struct LayerCheck {
  std::string name;
  GradCheckReport report;
};

inline nn::RunMode check_mode() {
  nn::RunMode m;
  m.training = true;
  m.dropout = false;
  m.fps_start = pointops::StartPolicy::lexicographic;
  return m;
}

/// Finite-difference checks of every layer kind at 64-bit on 8-plus-point
/// inputs, against both the parameters and the input features.
inline std::vector<LayerCheck> layer_gradient_checks(std::uint64_t seed = 1) {
  using nn::LayerKind;
  using nn::Stage;
  Rng rng(seed);
  const auto opts = layer_check_options();
  const auto mode = check_mode();
  std::vector<LayerCheck> out;
  auto both = [&](const std::string& name, const std::vector<Var<double>>& leaves, const Tensor<double>& input,
                  const std::function<Var<double>(const Var<double>&)>& op) {
    const auto weights = uniform<double>(op(constant(input)).shape(), rng);
    out.push_back({name + " parameters",
                   grad_check_leaves([&] { return dot(op(constant(input)), weights); }, leaves, opts)});
    out.push_back({name + " input", grad_check(op, input, opts)});
  };

  {
    // Multi-scale grouping with a residual-eligible layer and two groups.
    nn::SetAbstraction<double> sa(sa_spec("sa", 4, {0.6, 1.2}, {4, 8}, {{6, 6}, {4, 4}}, 2, 4), true, rng);
    const auto pts = clouds(2, 12, rng);
    std::vector<nn::NamedParameter<double>> params;
    sa.collect(params);
    both("set abstraction", leaves_of(params), uniform<double>({24, 4}, rng), [&](const Var<double>& f) {
      return *sa.forward(level<double>(Stage::bb, 1, pts, f), 4, mode).level.feats;
    });
  }
  {
    nn::SetAbstraction<double> sa(sa_spec("sa_global", 4, {}, {}, {{8}}, 2, 1), true, rng);
    const auto pts = clouds(2, 9, rng);
    std::vector<nn::NamedParameter<double>> params;
    sa.collect(params);
    both("global set abstraction", leaves_of(params), uniform<double>({18, 4}, rng), [&](const Var<double>& f) {
      return *sa.forward(level<double>(Stage::bb, 1, pts, f), 1, mode).level.feats;
    });
  }
  {
    nn::CrossReference<double> fcr(stage_spec("fcr", LayerKind::cross_reference, {4, 6}, {5, 5}, 1), true, rng);
    const auto pts = clouds(2, 8, rng);
    const auto next = clouds(2, 16, rng);
    auto bb = random_level<double>(Stage::bb, 2, pts, 6, rng);
    std::vector<nn::NamedParameter<double>> params;
    fcr.collect(params);
    both("cross reference", leaves_of(params), uniform<double>({16, 4}, rng), [&](const Var<double>& f) {
      auto running = level<double>(Stage::fcr, 2, pts, f);
      return *fcr.forward({&running, &bb}, next, 1, mode).feats;
    });
  }
  {
    nn::ReEncode<double> fre(stage_spec("fre", LayerKind::re_encode, {3, 4, 5}, {12, 12}, 2, 0.9, 4), true, rng);
    const auto pts = clouds(2, 10, rng);
    auto fcr = random_level<double>(Stage::fcr, 1, pts, 4, rng);
    auto bb = random_level<double>(Stage::bb, 1, pts, 5, rng);
    const std::vector<std::vector<std::size_t>> centers = {{0, 3, 5, 9}, {1, 2, 7, 8}};
    std::vector<nn::NamedParameter<double>> params;
    fre.collect(params);
    both("re-encoding", leaves_of(params), uniform<double>({20, 3}, rng), [&](const Var<double>& f) {
      auto prev = level<double>(Stage::fre, 1, pts, f);
      return *fre.forward({&prev, &fcr, &bb}, centers, 2, mode).feats;
    });
  }
  {
    nn::ReEncode<double> fre(stage_spec("fre_global", LayerKind::re_encode, {3, 5}, {8, 8}, 2), true, rng);
    const auto pts = clouds(2, 8, rng);
    auto bb = random_level<double>(Stage::bb, 3, pts, 5, rng);
    std::vector<nn::NamedParameter<double>> params;
    fre.collect(params);
    both("global re-encoding", leaves_of(params), uniform<double>({16, 3}, rng), [&](const Var<double>& f) {
      auto prev = level<double>(Stage::fre, 3, pts, f);
      return *fre.forward({&prev, &bb}, {}, 4, mode).feats;
    });
  }
  {
    nn::FeaturePropagation<double> fp(stage_spec("fp", LayerKind::feature_propagation, {6, 3}, {8, 4}, 1), rng);
    const auto coarse_pts = clouds(2, 5, rng);
    auto fine = random_level<double>(Stage::bb, 1, clouds(2, 12, rng), 3, rng);
    std::vector<nn::NamedParameter<double>> params;
    fp.collect(params);
    both("feature propagation", leaves_of(params), uniform<double>({10, 6}, rng), [&](const Var<double>& f) {
      auto coarse = level<double>(Stage::fre, 2, coarse_pts, f);
      return *fp.forward(coarse, fine, mode).feats;
    });
  }
  for (bool final : {false, true}) {
    nn::FullyConnected<double> fc(fc_spec(final ? "fc_logits" : "fc", 6, 4, 0.5, final), rng);
    std::vector<nn::NamedParameter<double>> params;
    fc.collect(params);
    both(final ? "fully connected logits" : "fully connected", leaves_of(params), uniform<double>({8, 6}, rng),
         [&](const Var<double>& x) { return fc.forward(x, mode); });
  }
  out.push_back({"reduction input", grad_check([](const Var<double>& x) { return nn::reduction(x, 3); },
                                                uniform<double>({8, 6}, rng), opts)});
  return out;
}

}  // namespace marnet::fixture
