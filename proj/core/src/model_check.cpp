#include "marnet/model_check.hpp"

#include <algorithm>
#include <cmath>

#include "marnet/ops.hpp"
#include "marnet/random.hpp"

namespace marnet {

namespace {

PointSet random_cloud(std::size_t n, Rng& rng) {
  PointSet p;
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 x{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double s = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (auto& a : v) a /= s;
    p.positions.push_back(x);
    p.normals.push_back(v);
  }
  return p;
}

}  // namespace

ModelGradCheckReport check_model_gradients(const ModelConfig& config, const ModelGradCheckOptions& o) {
  if (o.clouds < 2) throw ConfigError("gradient check needs at least 2 clouds for batch norm");
  Rng rng(o.seed);
  Model<double> model(config, rng.next());
  std::vector<PointSet> clouds;
  for (std::size_t b = 0; b < o.clouds; ++b) clouds.push_back(random_cloud(o.points, rng));
  const std::size_t rows = config.task == Task::classification ? o.clouds : o.clouds * o.points;
  std::vector<int> targets(rows);
  for (auto& t : targets) t = static_cast<int>(rng.index(config.n_outputs));

  nn::RunMode mode;
  mode.training = true;
  mode.dropout = false;
  mode.fps_start = pointops::StartPolicy::lexicographic;
  const auto loss = [&] {
    return softmax_cross_entropy(model.forward(clouds, mode).logits, std::span<const int>(targets));
  };

  GradCheckOptions go;
  go.epsilon = o.epsilon;
  go.tolerance = o.tolerance;
  go.max_elements = o.max_elements;
  go.zero_tolerance = o.zero_tolerance;
  go.metric = o.metric;
  go.skip_kinks = o.skip_kinks;
  // Kinks are bounded over the whole model, not per tensor.
  go.max_kink_fraction = 1.0;
  ModelGradCheckReport report;
  report.pass = true;
  for (const auto& p : model.parameters()) {
    go.seed = rng.next();
    ParameterCheck c{p.name, grad_check_leaves(loss, {p.var}, go)};
    report.max_rel_err = std::max(report.max_rel_err, c.report.max_rel_err);
    report.pass = report.pass && c.report.pass;
    report.checked += c.report.checked;
    report.zeros += c.report.zeros;
    report.kinks += c.report.kinks;
    report.parameters.push_back(std::move(c));
  }
  const auto nonzero = static_cast<double>(report.checked - report.zeros);
  report.pass = report.pass && static_cast<double>(report.kinks) <= o.max_kink_fraction * nonzero;
  return report;
}

}  // namespace marnet
