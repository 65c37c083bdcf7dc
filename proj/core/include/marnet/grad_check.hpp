#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "marnet/tensor.hpp"

namespace marnet {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  // Entries where both gradients fell below zero_tolerance.
  std::size_t zeros = 0;
  // Entries skipped because a ReLU or max switched inside +-epsilon.
  std::size_t kinks = 0;
  // Set when a forward evaluation threw (e.g. a non-finite intermediate).
  std::string failure;
};

enum class GradCheckMetric {
  // max over elements of |a - n| / max(|a|, |n|, 1e-12)
  elementwise,
  // |a - n|_2 / max(|a|_2, |n|_2, 1e-12) per tensor; robust to entries far
  // below the tensor's gradient scale, where roundoff dominates.
  tensor,
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  double tolerance = 1e-5;
  // Upper bound on perturbed elements per tensor; 0 checks all of them.
  std::size_t max_elements = 0;
  std::uint64_t seed = 1;
  // Entries with |analytic| and |numeric| both below this are treated as
  // exact zeros, whose relative error is undefined. 0 disables.
  double zero_tolerance = 0.0;
  GradCheckMetric metric = GradCheckMetric::elementwise;
  // Skip entries whose one-sided slopes disagree by more than kink_tolerance
  // relative to the tensor scale. More than max_kink_fraction of skipped
  // entries fails the check.
  bool skip_kinks = false;
  double kink_tolerance = 1e-3;
  double max_kink_fraction = 0.25;
};

/// Central-difference check of op against its backward pass. The op output
/// is contracted with fixed random weights to a scalar, so every output
/// element contributes. rel_err = |a - n| / max(|a|, |n|, 1e-12).
GradCheckReport grad_check(const std::function<Var<double>(const Var<double>&)>& op,
                           const Tensor<double>& input, const GradCheckOptions& options = {});

/// Same check against the gradients of existing leaves (e.g. parameters).
/// loss must return a scalar built from those leaves.
GradCheckReport grad_check_leaves(const std::function<Var<double>()>& loss,
                                  const std::vector<Var<double>>& leaves,
                                  const GradCheckOptions& options = {});

}  // namespace marnet
