#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "marnet/grad_check.hpp"
#include "marnet/model.hpp"

namespace marnet {

struct ModelGradCheckOptions {
  std::size_t clouds = 4;
  std::size_t points = 8;
  // Perturbed elements per parameter tensor; 0 checks all of them.
  std::size_t max_elements = 4;
  double epsilon = 1e-6;
  double tolerance = 1e-5;
  // Bias terms ahead of batch norm have an exact zero gradient.
  double zero_tolerance = 1e-7;
  GradCheckMetric metric = GradCheckMetric::tensor;
  bool skip_kinks = true;
  // Largest tolerated share of kinks among the non-zero entries.
  double max_kink_fraction = 0.1;
  std::uint64_t seed = 1;
};

struct ParameterCheck {
  std::string name;
  GradCheckReport report;
};

struct ModelGradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t zeros = 0;
  std::size_t kinks = 0;
  std::vector<ParameterCheck> parameters;
};

/// Finite-difference check of every parameter of a 64-bit model on random
/// clouds, with training-mode batch norm, no dropout and the deterministic
/// FPS start.
ModelGradCheckReport check_model_gradients(const ModelConfig& config, const ModelGradCheckOptions& options = {});

}  // namespace marnet
