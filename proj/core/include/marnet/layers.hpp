#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "marnet/ops.hpp"
#include "marnet/pointops.hpp"
#include "marnet/random.hpp"
#include "marnet/tensor.hpp"

namespace marnet::nn {

enum class Stage { input, bb, fcr, fre, fp };

const char* to_string(Stage stage);

/// Points and features of one abstraction level for a batch of clouds.
/// Features are stacked cloud-major: row b * points() + i.
template <class T>
struct LevelState {
  Stage stage = Stage::input;
  int level = 0;
  std::vector<PointSet> clouds;
  std::optional<Var<T>> feats;

  std::size_t batch() const { return clouds.size(); }
  std::size_t points() const { return clouds.empty() ? 0 : clouds.front().size(); }
  std::size_t channels() const { return feats ? feats->cols() : 0; }
};

/// Per-call switches shared by every layer.
struct RunMode {
  bool training = false;
  // Replace every batch norm by the identity (wiring tests).
  bool bypass_bn = false;
  // Dropout is active only when training and this is set.
  bool dropout = true;
  pointops::StartPolicy fps_start = pointops::StartPolicy::lexicographic;
  // Source of FPS random starts and dropout masks.
  Rng* rng = nullptr;
};

enum class LayerKind { set_abstraction, cross_reference, re_encode, feature_propagation, fully_connected };

const char* to_string(LayerKind kind);

/// Declarative hyperparameters of one layer.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::set_abstraction;
  // Width of every concatenated source, in concatenation order.
  std::vector<std::size_t> in_channels;
  // Grouping radii; empty means global pooling over all points.
  std::vector<double> radii;
  std::vector<std::size_t> samples;
  // Set abstraction: one width list per radius. Otherwise exactly one list.
  std::vector<std::vector<std::size_t>> mlp;
  std::size_t n_groups = 1;
  // Centers sampled for a reference-size input (set abstraction only).
  std::size_t out_points = 0;
  double dropout = 0.0;
  // Fully connected: the logits layer (no batch norm, ReLU or dropout).
  bool final = false;

  std::size_t total_in() const;
  std::size_t out_width() const;
  bool global() const { return radii.empty(); }
};

/// Throws ConfigError naming the layer when the layer config is inconsistent.
void validate(const LayerSpec& spec);

/// Groups actually used for a cin -> cout map: gcd(cin, cout, n_groups).
std::size_t effective_groups(std::size_t cin, std::size_t cout, std::size_t n_groups);

/// Reduction factor k of a cross-reference level (concat width / output).
std::size_t reduction_factor(const LayerSpec& spec);

template <class T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Sum of k adjacent channels: [.., D] -> [.., D/k]. Parameter free; the
/// backward copies each output gradient to all k members of its bucket.
template <class T>
Var<T> reduction(const Var<T>& f, std::size_t k);

template <class T>
class GroupedLinear {
 public:
  GroupedLinear(std::string name, std::size_t in, std::size_t out, std::size_t groups, Rng& rng);

  Var<T> forward(const Var<T>& x) const { return grouped_linear(x, weight_, bias_, groups_); }

  void collect(std::vector<NamedParameter<T>>& out) const;

  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  std::size_t groups() const { return groups_; }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }

 private:
  std::string name_;
  std::size_t in_, out_, groups_;
  Var<T> weight_, bias_;
};

template <class T>
class BatchNorm {
 public:
  BatchNorm(std::string name, std::size_t channels);

  Var<T> forward(const Var<T>& x, const RunMode& mode);

  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

 private:
  std::string name_;
  Var<T> gamma_, beta_;
  BatchNormState<T> state_;
};

/// Stack of point-wise grouped-linear -> batch norm -> ReLU layers. With
/// per_layer_residual, a layer whose input and output widths match adds its
/// input back (identity residual); width-changing layers never do.
template <class T>
class SharedMlp {
 public:
  SharedMlp(const std::string& name, std::size_t in, const std::vector<std::size_t>& widths,
            std::size_t n_groups, bool per_layer_residual, Rng& rng);

  Var<T> forward(const Var<T>& x, const RunMode& mode);

  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

  std::size_t in() const { return in_; }
  std::size_t out() const { return layers_.empty() ? in_ : layers_.back().linear.out(); }

 private:
  struct Layer {
    GroupedLinear<T> linear;
    BatchNorm<T> norm;
    bool residual;
  };
  std::size_t in_;
  std::vector<Layer> layers_;
};

/// Output of a set abstraction: the next level plus, per cloud, the indices
/// (into the input level) of the sampled centers.
template <class T>
struct Abstraction {
  LevelState<T> level;
  std::vector<std::vector<std::size_t>> centers;
};

/// Sample, group, transform, pool. One branch per radius (several radii =
/// multi-scale grouping, branch outputs concatenated).
template <class T>
class SetAbstraction {
 public:
  SetAbstraction(const LayerSpec& spec, bool residual, Rng& rng);

  /// out_points is the center count for this input size; ignored for the
  /// global variant, which pools each cloud to a single point at the origin.
  Abstraction<T> forward(const LevelState<T>& in, std::size_t out_points, const RunMode& mode);

  const LayerSpec& spec() const { return spec_; }
  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

 private:
  LayerSpec spec_;
  std::vector<SharedMlp<T>> branches_;
};

/// Concatenate the running cross-reference features with the same-level
/// backbone features, refine (transform + reduction residual), and
/// interpolate to the next finer level.
template <class T>
class CrossReference {
 public:
  CrossReference(const LayerSpec& spec, bool residual, Rng& rng);

  /// sources share points; the result lives on `next`.
  LevelState<T> forward(const std::vector<const LevelState<T>*>& sources,
                        const std::vector<PointSet>& next, int next_level, const RunMode& mode);

  const LayerSpec& spec() const { return spec_; }
  std::size_t k() const { return k_; }
  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

 private:
  LayerSpec spec_;
  std::size_t k_;
  bool residual_;
  SharedMlp<T> mlp_;
};

/// Concatenate features of all stages at one level, refine with an identity
/// residual, then group around the given centers and max-pool (or pool
/// globally).
template <class T>
class ReEncode {
 public:
  ReEncode(const LayerSpec& spec, bool residual, Rng& rng);

  /// centers[b] indexes the points of the sources; ignored when global.
  LevelState<T> forward(const std::vector<const LevelState<T>*>& sources,
                        const std::vector<std::vector<std::size_t>>& centers, int next_level,
                        const RunMode& mode);

  const LayerSpec& spec() const { return spec_; }
  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

 private:
  LayerSpec spec_;
  bool residual_;
  SharedMlp<T> mlp_;
};

/// Interpolate coarse features to the fine points, append the fine skip
/// features and apply a dense shared MLP.
template <class T>
class FeaturePropagation {
 public:
  FeaturePropagation(const LayerSpec& spec, Rng& rng);

  LevelState<T> forward(const LevelState<T>& coarse, const LevelState<T>& fine_skip, const RunMode& mode);

  const LayerSpec& spec() const { return spec_; }
  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

 private:
  LayerSpec spec_;
  SharedMlp<T> mlp_;
};

/// linear -> batch norm -> ReLU -> dropout, or a bare linear map for the
/// final (logits) layer.
template <class T>
class FullyConnected {
 public:
  FullyConnected(const LayerSpec& spec, Rng& rng);

  Var<T> forward(const Var<T>& x, const RunMode& mode);

  const LayerSpec& spec() const { return spec_; }
  void collect(std::vector<NamedParameter<T>>& out) const;
  void collect_buffers(std::vector<NamedBuffer<T>>& out);

 private:
  LayerSpec spec_;
  GroupedLinear<T> linear_;
  std::optional<BatchNorm<T>> norm_;
};

}  // namespace marnet::nn
