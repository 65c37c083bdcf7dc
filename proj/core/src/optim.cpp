#include "marnet/optim.hpp"

#include <cmath>
#include <string>

namespace marnet {

template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& moments,
               std::uint64_t step, const AdamOptions& o) {
  if (step < 1) throw Error("adam_step: step counter must be >= 1");
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  if (moments.m.empty()) {
    moments.m.assign(params.size(), 0.0);
    moments.v.assign(params.size(), 0.0);
  }
  if (moments.m.size() != params.size() || moments.v.size() != params.size()) {
    throw ShapeError("adam_step: moment buffers do not match the parameter size");
  }
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]) + o.weight_decay * static_cast<double>(params[i]);
    double& m = moments.m[i];
    double& v = moments.v[i];
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g * g;
    const double update = o.lr * (m / c1) / (std::sqrt(v / c2) + o.eps);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - update);
  }
}

template <class T>
Adam<T>::Adam(std::vector<Var<T>> params, AdamOptions options)
    : params_(std::move(params)), moments_(params_.size()), options_(options) {}

template <class T>
void Adam<T>::step() {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].value();
    // A parameter outside the executed graph has no gradient buffer yet.
    std::span<const T> grad = std::as_const(value).grad();
    std::vector<T> zeros;
    if (grad.size() != value.size()) {
      zeros.assign(value.size(), T{0});
      grad = zeros;
    }
    adam_step<T>(value.data(), grad, moments_[i], steps_, options_);
  }
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.value().zero_grad();
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamMoments<float>&,
                               std::uint64_t, const AdamOptions&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamMoments<double>&,
                                std::uint64_t, const AdamOptions&);
template class Adam<float>;
template class Adam<double>;

}  // namespace marnet
