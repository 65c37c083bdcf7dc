#include "marnet/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "marnet/ops.hpp"
#include "marnet/random.hpp"

namespace marnet {
namespace {

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

std::vector<std::size_t> pick_elements(std::size_t size, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (limit == 0 || limit >= size) return idx;
  for (std::size_t i = 0; i < limit; ++i) std::swap(idx[i], idx[i + rng.index(size - i)]);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void check_options(const GradCheckOptions& o) {
  if (!(o.epsilon >= 1e-7 && o.epsilon <= 1e-4)) {
    throw ConfigError("grad_check epsilon must lie in [1e-7, 1e-4]");
  }
}

}  // namespace

GradCheckReport grad_check_leaves(const std::function<Var<double>()>& loss,
                                  const std::vector<Var<double>>& leaves,
                                  const GradCheckOptions& options) {
  check_options(options);
  GradCheckReport report;
  try {
    for (auto leaf : leaves) leaf.value().zero_grad();
    auto out = loss();
    const double center = out.value()[0];
    backward(out);
    Rng rng(options.seed);
    for (auto leaf : leaves) {
      auto& value = leaf.value();
      std::vector<double> analytic(value.grad().begin(), value.grad().end());
      const auto picked = pick_elements(value.size(), options.max_elements, rng);
      double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
      double full2 = 0.0;
      for (double a : analytic) full2 += a * a;
      const double rms = std::sqrt(full2 / static_cast<double>(std::max<std::size_t>(value.size(), 1)));
      for (std::size_t i : picked) {
        const double saved = value[i];
        value[i] = saved + options.epsilon;
        double up;
        {
          NoGradGuard guard;
          up = loss().value()[0];
        }
        value[i] = saved - options.epsilon;
        double down;
        {
          NoGradGuard guard;
          down = loss().value()[0];
        }
        value[i] = saved;
        const double numeric = (up - down) / (2.0 * options.epsilon);
        ++report.checked;
        if (std::abs(analytic[i]) < options.zero_tolerance && std::abs(numeric) < options.zero_tolerance) {
          ++report.zeros;
          continue;
        }
        if (options.skip_kinks) {
          const double right = (up - center) / options.epsilon;
          const double left = (center - down) / options.epsilon;
          const double scale = std::max({std::abs(right), std::abs(left), rms, 1e-12});
          if (std::abs(right - left) > options.kink_tolerance * scale) {
            ++report.kinks;
            continue;
          }
        }
        if (options.metric == GradCheckMetric::elementwise) {
          report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[i], numeric));
        }
        diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
        a2 += analytic[i] * analytic[i];
        n2 += numeric * numeric;
      }
      if (options.metric == GradCheckMetric::tensor && !picked.empty()) {
        // A sampled subset is measured against the tensor's own gradient
        // scale: its full analytic norm shrunk to the subset size.
        const double scale = std::sqrt(full2 * static_cast<double>(picked.size()) / static_cast<double>(value.size()));
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), scale, 1e-12});
        report.max_rel_err = std::max(report.max_rel_err, std::sqrt(diff2) / denom);
      }
    }
    for (auto leaf : leaves) leaf.value().zero_grad();
  } catch (const Error& e) {
    report.failure = e.what();
    report.pass = false;
    return report;
  }
  report.pass = report.max_rel_err < options.tolerance &&
                static_cast<double>(report.kinks) <= options.max_kink_fraction * static_cast<double>(report.checked);
  return report;
}

GradCheckReport grad_check(const std::function<Var<double>(const Var<double>&)>& op,
                           const Tensor<double>& input, const GradCheckOptions& options) {
  check_options(options);
  auto x = parameter(input);
  Tensor<double> weights;
  bool have_weights = false;
  auto contracted = [&]() {
    auto y = op(x);
    if (!have_weights) {
      Rng rng(options.seed ^ 0x5bd1e995u);
      weights = Tensor<double>(y.shape());
      for (auto& w : weights.data()) w = rng.uniform(-1.0, 1.0);
      have_weights = true;
    }
    return dot(y, weights);
  };
  return grad_check_leaves(contracted, {x}, options);
}

}  // namespace marnet
