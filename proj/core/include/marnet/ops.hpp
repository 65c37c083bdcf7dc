#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "marnet/random.hpp"
#include "marnet/tensor.hpp"

// Differentiable ops. Inputs are read as matrices (rows x channels) where
// rows is the product of all leading extents.

namespace marnet {

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

/// y = x W + b with channels split into n_groups independent blocks.
/// weight has shape (n_groups, C_in/n_groups, C_out/n_groups); bias (C_out).
template <class T>
Var<T> grouped_linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                      std::size_t n_groups);

template <class T>
Var<T> relu(const Var<T>& x);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// Concatenate along the channel axis; all parts share the row count.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

/// out[i] = src[rows[i]]. Backward scatter-adds.
template <class T>
Var<T> gather_rows(const Var<T>& src, std::span<const std::size_t> rows);

/// out[i] = sum_j weights[i*per_row + j] * src[index[i*per_row + j]].
/// Linear in src; the weights are constants.
template <class T>
Var<T> weighted_gather(const Var<T>& src, std::span<const std::size_t> index,
                       std::span<const T> weights, std::size_t per_row);

/// Per-channel maximum over consecutive blocks of set_size rows:
/// [G*S, D] -> [G, D]. The gradient goes to the lowest-index maximizer.
template <class T>
Var<T> max_over_set(const Var<T>& x, std::size_t set_size);
/// Whole input as one set: [S, D] -> [D].
template <class T>
Var<T> max_over_set(const Var<T>& x);

template <class T>
Var<T> mean_over_set(const Var<T>& x, std::size_t set_size);

template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// Training mode normalizes by batch statistics (biased variance) and
/// updates the running statistics (unbiased variance). Eval mode uses the
/// running statistics.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  BatchNormState<T>& state, bool training);

/// Inverted dropout; identity in eval mode or for p == 0.
template <class T>
Var<T> dropout(const Var<T>& x, double p, bool training, Rng& rng);

/// Mean negative log-likelihood of integer targets under softmax(logits).
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> targets);

template <class T>
Var<T> sum(const Var<T>& x);

/// Scalar sum_i x[i] * w[i] with constant w.
template <class T>
Var<T> dot(const Var<T>& x, const Tensor<T>& w);

/// Row-wise softmax, no gradient.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace marnet
