#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "marnet/tensor.hpp"

namespace marnet {

struct AdamOptions {
  double lr = 1e-3;
  double weight_decay = 0.0;  // coupled: added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates of one parameter tensor.
template <class T>
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One Adam update of params in place. step is the 1-based update count
/// used for bias correction.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments,
               std::uint64_t step, const AdamOptions& options);

/// Adam over a fixed parameter list, reading the accumulated leaf gradients.
template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamOptions options);

  void step();
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

  std::vector<AdamMoments<T>>& moments() { return moments_; }
  const std::vector<AdamMoments<T>>& moments() const { return moments_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<AdamMoments<T>> moments_;
  AdamOptions options_;
  std::uint64_t steps_ = 0;
};

}  // namespace marnet
