#include "marnet/layers.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace marnet::nn {

const char* to_string(Stage stage) {
  switch (stage) {
    case Stage::input: return "input";
    case Stage::bb: return "bb";
    case Stage::fcr: return "fcr";
    case Stage::fre: return "fre";
    case Stage::fp: return "fp";
  }
  return "?";
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::set_abstraction: return "set_abstraction";
    case LayerKind::cross_reference: return "cross_reference";
    case LayerKind::re_encode: return "re_encode";
    case LayerKind::feature_propagation: return "feature_propagation";
    case LayerKind::fully_connected: return "fully_connected";
  }
  return "?";
}

std::size_t LayerSpec::total_in() const {
  return std::accumulate(in_channels.begin(), in_channels.end(), std::size_t{0});
}

std::size_t LayerSpec::out_width() const {
  if (kind == LayerKind::set_abstraction) {
    std::size_t w = 0;
    for (const auto& m : mlp) w += m.empty() ? 0 : m.back();
    return w;
  }
  return mlp.empty() || mlp.front().empty() ? 0 : mlp.front().back();
}

namespace {

[[noreturn]] void fail(const LayerSpec& spec, const std::string& what) {
  throw ConfigError("layer " + (spec.name.empty() ? std::string("<unnamed>") : spec.name) + ": " + what);
}

}  // namespace

void validate(const LayerSpec& spec) {
  if (spec.name.empty()) fail(spec, "missing name");
  if (spec.n_groups == 0) fail(spec, "n_groups must be >= 1");
  if (spec.mlp.empty()) fail(spec, "no MLP widths");
  for (const auto& m : spec.mlp) {
    if (m.empty()) fail(spec, "empty MLP width list");
    for (auto w : m)
      if (w == 0) fail(spec, "MLP widths must be positive");
  }
  if (spec.in_channels.empty()) fail(spec, "no input channel list");
  for (double r : spec.radii)
    if (!(r > 0.0)) fail(spec, "radii must be positive");
  for (auto s : spec.samples)
    if (s == 0) fail(spec, "sample counts must be positive");
  switch (spec.kind) {
    case LayerKind::set_abstraction:
      if (spec.in_channels.size() != 1) fail(spec, "set abstraction takes a single input");
      if (spec.global()) {
        if (!spec.samples.empty() || spec.mlp.size() != 1) {
          fail(spec, "global pooling takes no samples and exactly one MLP");
        }
      } else {
        if (spec.samples.size() != spec.radii.size() || spec.mlp.size() != spec.radii.size()) {
          fail(spec, "radii, samples and MLP lists must have equal length");
        }
        if (spec.out_points == 0) fail(spec, "out_points must be >= 1");
      }
      break;
    case LayerKind::cross_reference:
      if (spec.mlp.size() != 1 || !spec.radii.empty()) fail(spec, "expects one MLP and no grouping");
      if (spec.total_in() % spec.out_width() != 0) {
        fail(spec, "reduction factor " + std::to_string(spec.total_in()) + "/" +
                       std::to_string(spec.out_width()) + " is not an integer");
      }
      break;
    case LayerKind::re_encode:
      if (spec.mlp.size() != 1) fail(spec, "expects one MLP");
      if (spec.radii.size() > 1 || spec.samples.size() != spec.radii.size()) {
        fail(spec, "expects at most one radius with a matching sample count");
      }
      if (spec.total_in() != spec.out_width()) {
        fail(spec, "identity residual needs input width " + std::to_string(spec.total_in()) +
                       " to equal output width " + std::to_string(spec.out_width()));
      }
      break;
    case LayerKind::feature_propagation:
      if (spec.mlp.size() != 1 || spec.in_channels.size() > 2) fail(spec, "expects one MLP and <= 2 inputs");
      break;
    case LayerKind::fully_connected:
      if (spec.mlp.size() != 1 || spec.mlp.front().size() != 1 || spec.in_channels.size() != 1) {
        fail(spec, "expects a single input width and a single output width");
      }
      if (!(spec.dropout >= 0.0 && spec.dropout < 1.0)) fail(spec, "dropout must lie in [0, 1)");
      break;
  }
}

std::size_t effective_groups(std::size_t cin, std::size_t cout, std::size_t n_groups) {
  return std::gcd(std::gcd(cin, cout), n_groups);
}

std::size_t reduction_factor(const LayerSpec& spec) {
  validate(spec);
  return spec.total_in() / spec.out_width();
}

template <class T>
Var<T> reduction(const Var<T>& f, std::size_t k) {
  const std::size_t d = f.cols();
  if (k == 0 || d % k != 0) {
    throw ConfigError("reduction: " + std::to_string(d) + " channels are not divisible by k = " +
                      std::to_string(k));
  }
  const std::size_t rows = f.rows();
  const std::size_t out_d = d / k;
  Tensor<T> out(Shape{rows, out_d});
  const T* in = f.value().data().data();
  T* o = out.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out_d; ++j) {
      T acc = T{0};
      for (std::size_t i = 0; i < k; ++i) acc += in[r * d + j * k + i];
      o[r * out_d + j] = acc;
    }
  return make_result<T>(std::move(out), {f}, "reduction", [k, d, out_d, rows](Node<T>& n) {
    const T* dy = n.value.grad().data();
    T* dx = n.parents[0]->value.grad().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_d; ++j)
        for (std::size_t i = 0; i < k; ++i) dx[r * d + j * k + i] += dy[r * out_d + j];
  });
}

// ---------------------------------------------------------------------------

template <class T>
GroupedLinear<T>::GroupedLinear(std::string name, std::size_t in, std::size_t out, std::size_t groups,
                                Rng& rng)
    : name_(std::move(name)), in_(in), out_(out), groups_(groups) {
  if (groups == 0 || in % groups != 0 || out % groups != 0) {
    throw ConfigError("layer " + name_ + ": " + std::to_string(in) + " -> " + std::to_string(out) +
                      " channels are not divisible into " + std::to_string(groups) + " groups");
  }
  const std::size_t gi = in / groups;
  const std::size_t go = out / groups;
  Tensor<T> w(Shape{groups, gi, go});
  const double bound = std::sqrt(1.0 / static_cast<double>(gi));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  weight_ = parameter(std::move(w));
  bias_ = parameter(Tensor<T>(Shape{out}, T{0}));
}

template <class T>
void GroupedLinear<T>::collect(std::vector<NamedParameter<T>>& out) const {
  out.push_back({name_ + ".weight", weight_});
  out.push_back({name_ + ".bias", bias_});
}

template <class T>
BatchNorm<T>::BatchNorm(std::string name, std::size_t channels)
    : name_(std::move(name)),
      gamma_(parameter(Tensor<T>(Shape{channels}, T{1}))),
      beta_(parameter(Tensor<T>(Shape{channels}, T{0}))),
      state_(channels) {}

template <class T>
Var<T> BatchNorm<T>::forward(const Var<T>& x, const RunMode& mode) {
  if (mode.bypass_bn) return x;
  return batch_norm(x, gamma_, beta_, state_, mode.training);
}

template <class T>
void BatchNorm<T>::collect(std::vector<NamedParameter<T>>& out) const {
  out.push_back({name_ + ".gamma", gamma_});
  out.push_back({name_ + ".beta", beta_});
}

template <class T>
void BatchNorm<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  out.push_back({name_ + ".running_mean", &state_.running_mean});
  out.push_back({name_ + ".running_var", &state_.running_var});
}

template <class T>
SharedMlp<T>::SharedMlp(const std::string& name, std::size_t in, const std::vector<std::size_t>& widths,
                        std::size_t n_groups, bool per_layer_residual, Rng& rng)
    : in_(in) {
  std::size_t c = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string prefix = name + ".l" + std::to_string(i);
    const std::size_t g = effective_groups(c, widths[i], n_groups);
    layers_.push_back(Layer{GroupedLinear<T>(prefix + ".linear", c, widths[i], g, rng),
                            BatchNorm<T>(prefix + ".bn", widths[i]),
                            per_layer_residual && c == widths[i]});
    c = widths[i];
  }
}

template <class T>
Var<T> SharedMlp<T>::forward(const Var<T>& x, const RunMode& mode) {
  if (x.cols() != in_) {
    throw ShapeError("shared MLP expects " + std::to_string(in_) + " channels, got " +
                     std::to_string(x.cols()));
  }
  Var<T> h = x;
  for (auto& layer : layers_) {
    Var<T> y = relu(layer.norm.forward(layer.linear.forward(h), mode));
    h = layer.residual ? add(y, h) : y;
  }
  return h;
}

template <class T>
void SharedMlp<T>::collect(std::vector<NamedParameter<T>>& out) const {
  for (const auto& l : layers_) {
    l.linear.collect(out);
    l.norm.collect(out);
  }
}

template <class T>
void SharedMlp<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  for (auto& l : layers_) l.norm.collect_buffers(out);
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
void require_batch(const LevelState<T>& s, const std::string& layer) {
  if (s.batch() == 0 || s.points() == 0) throw ShapeError(layer + ": empty input level");
  for (const auto& c : s.clouds) {
    if (c.size() != s.points()) throw ShapeError(layer + ": clouds in a batch must have equal sizes");
  }
  if (s.feats && s.feats->rows() != s.batch() * s.points()) {
    throw ShapeError(layer + ": " + std::to_string(s.feats->rows()) + " feature rows for " +
                     std::to_string(s.batch() * s.points()) + " points");
  }
}

template <class T>
Var<T> concat_sources(const std::vector<const LevelState<T>*>& sources, const LayerSpec& spec) {
  if (sources.size() != spec.in_channels.size()) {
    throw ShapeError(spec.name + ": expected " + std::to_string(spec.in_channels.size()) + " inputs, got " +
                     std::to_string(sources.size()));
  }
  std::vector<Var<T>> parts;
  const auto& first = *sources.front();
  require_batch(first, spec.name);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& s = *sources[i];
    require_batch(s, spec.name);
    if (s.points() != first.points() || s.batch() != first.batch()) {
      throw ShapeError(spec.name + ": concatenated inputs must share their points");
    }
    if (s.channels() != spec.in_channels[i]) {
      throw ShapeError(spec.name + ": input " + std::to_string(i) + " has " + std::to_string(s.channels()) +
                       " channels, layer config says " + std::to_string(spec.in_channels[i]));
    }
    parts.push_back(*s.feats);
  }
  return parts.size() == 1 ? parts.front() : concat_channels(parts);
}

PointSet origin_point() {
  PointSet p;
  p.positions.push_back(Vec3{0.0, 0.0, 0.0});
  p.normals.push_back(Vec3{0.0, 0.0, 0.0});
  return p;
}

template <class T>
Var<T> interpolate_batch(const std::vector<PointSet>& coarse, const Var<T>& feats,
                         const std::vector<PointSet>& fine) {
  if (coarse.size() != fine.size()) throw ShapeError("interpolation: batch sizes differ");
  const std::size_t nc = coarse.front().size();
  std::vector<std::size_t> index;
  std::vector<T> weights;
  std::size_t per_point = 0;
  for (std::size_t b = 0; b < coarse.size(); ++b) {
    auto w = pointops::three_nn_weights(coarse[b], fine[b]);
    per_point = w.per_point;
    for (auto i : w.indices) index.push_back(b * nc + i);
    for (double v : w.weights) weights.push_back(static_cast<T>(v));
  }
  return weighted_gather<T>(feats, index, weights, per_point);
}

// Rows of the grouped members, and max-pooling over each group.
template <class T>
Var<T> group_and_pool(const Var<T>& feats, const std::vector<PointSet>& clouds,
                      const std::vector<PointSet>& centers, double radius, std::size_t samples) {
  const std::size_t n = clouds.front().size();
  std::vector<std::size_t> rows;
  rows.reserve(clouds.size() * centers.front().size() * samples);
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    for (const auto& g : pointops::ball_query(clouds[b], centers[b], radius, samples))
      for (auto m : g.members) rows.push_back(b * n + m);
  }
  return max_over_set(gather_rows(feats, rows), samples);
}

}  // namespace

template <class T>
SetAbstraction<T>::SetAbstraction(const LayerSpec& spec, bool residual, Rng& rng) : spec_(spec) {
  validate(spec_);
  if (spec_.kind != LayerKind::set_abstraction) throw ConfigError(spec_.name + ": not a set abstraction spec");
  const std::size_t in = spec_.in_channels.front() + 6;
  for (std::size_t r = 0; r < spec_.mlp.size(); ++r) {
    branches_.emplace_back(spec_.name + ".b" + std::to_string(r), in, spec_.mlp[r], spec_.n_groups, residual,
                           rng);
  }
}

template <class T>
Abstraction<T> SetAbstraction<T>::forward(const LevelState<T>& in, std::size_t out_points,
                                          const RunMode& mode) {
  require_batch(in, spec_.name);
  if (in.channels() != spec_.in_channels.front()) {
    throw ShapeError(spec_.name + ": expected " + std::to_string(spec_.in_channels.front()) +
                     " input channels, got " + std::to_string(in.channels()));
  }
  const std::size_t batch = in.batch();
  const std::size_t n = in.points();
  const bool global = spec_.global();
  if (!global && (out_points == 0 || out_points > n)) {
    throw ShapeError(spec_.name + ": cannot sample " + std::to_string(out_points) + " centers from " +
                     std::to_string(n) + " points");
  }
  Abstraction<T> result;
  result.level.stage = Stage::bb;
  result.level.level = in.level + 1;
  result.centers.resize(batch);
  std::vector<PointSet> centers(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (global) {
      centers[b] = origin_point();
    } else {
      result.centers[b] =
          pointops::farthest_point_sample(in.clouds[b], out_points, {mode.fps_start, mode.rng});
      centers[b] = select(in.clouds[b], result.centers[b]);
    }
  }
  const std::size_t m = global ? 1 : out_points;
  std::vector<Var<T>> pooled;
  for (std::size_t r = 0; r < branches_.size(); ++r) {
    const std::size_t s = global ? n : spec_.samples[r];
    std::vector<std::size_t> rows;
    rows.reserve(batch * m * s);
    Tensor<T> geometry(Shape{batch * m * s, 6});
    T* geo = geometry.data().data();
    std::size_t row = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const PointSet& cloud = in.clouds[b];
      std::vector<pointops::NeighborGroup> groups;
      if (global) {
        groups.resize(1);
        groups[0].members.resize(n);
        std::iota(groups[0].members.begin(), groups[0].members.end(), std::size_t{0});
      } else {
        groups = pointops::ball_query(cloud, centers[b], spec_.radii[r], s);
      }
      for (std::size_t c = 0; c < m; ++c) {
        const Vec3& p = centers[b].positions[c];
        for (auto q : groups[c].members) {
          rows.push_back(b * n + q);
          const Vec3& qp = cloud.positions[q];
          T* g = geo + row * 6;
          for (int a = 0; a < 3; ++a) g[a] = static_cast<T>(qp[a] - p[a]);
          for (int a = 0; a < 3; ++a) g[3 + a] = cloud.has_normals() ? static_cast<T>(cloud.normals[q][a]) : T{0};
          ++row;
        }
      }
    }
    Var<T> input = constant(std::move(geometry));
    if (in.feats) input = concat_channels<T>({gather_rows(*in.feats, rows), input});
    Var<T> h = branches_[r].forward(input, mode);
    pooled.push_back(max_over_set(h, s));
  }
  result.level.clouds = std::move(centers);
  result.level.feats = pooled.size() == 1 ? pooled.front() : concat_channels(pooled);
  return result;
}

template <class T>
void SetAbstraction<T>::collect(std::vector<NamedParameter<T>>& out) const {
  for (const auto& b : branches_) b.collect(out);
}

template <class T>
void SetAbstraction<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  for (auto& b : branches_) b.collect_buffers(out);
}

// ---------------------------------------------------------------------------

template <class T>
CrossReference<T>::CrossReference(const LayerSpec& spec, bool residual, Rng& rng)
    : spec_(spec),
      k_(reduction_factor(spec)),
      residual_(residual),
      mlp_(spec.name + ".phi", spec.total_in(), spec.mlp.front(), spec.n_groups, false, rng) {
  if (spec_.kind != LayerKind::cross_reference) throw ConfigError(spec_.name + ": not a cross-reference spec");
}

template <class T>
LevelState<T> CrossReference<T>::forward(const std::vector<const LevelState<T>*>& sources,
                                         const std::vector<PointSet>& next, int next_level,
                                         const RunMode& mode) {
  Var<T> cat = concat_sources(sources, spec_);
  Var<T> refined = mlp_.forward(cat, mode);
  if (residual_) refined = add(refined, reduction(cat, k_));
  LevelState<T> out;
  out.stage = Stage::fcr;
  out.level = next_level;
  out.clouds = next;
  out.feats = interpolate_batch(sources.front()->clouds, refined, next);
  return out;
}

template <class T>
void CrossReference<T>::collect(std::vector<NamedParameter<T>>& out) const {
  mlp_.collect(out);
}

template <class T>
void CrossReference<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  mlp_.collect_buffers(out);
}

template <class T>
ReEncode<T>::ReEncode(const LayerSpec& spec, bool residual, Rng& rng)
    : spec_((validate(spec), spec)),
      residual_(residual),
      mlp_(spec.name + ".phi", spec.total_in(), spec.mlp.front(), spec.n_groups, false, rng) {
  if (spec_.kind != LayerKind::re_encode) throw ConfigError(spec_.name + ": not a re-encoding spec");
}

template <class T>
LevelState<T> ReEncode<T>::forward(const std::vector<const LevelState<T>*>& sources,
                                   const std::vector<std::vector<std::size_t>>& centers, int next_level,
                                   const RunMode& mode) {
  Var<T> cat = concat_sources(sources, spec_);
  Var<T> refined = mlp_.forward(cat, mode);
  if (residual_) refined = add(refined, cat);
  const auto& clouds = sources.front()->clouds;
  LevelState<T> out;
  out.stage = Stage::fre;
  out.level = next_level;
  if (spec_.global()) {
    out.clouds.assign(clouds.size(), origin_point());
    out.feats = max_over_set(refined, clouds.front().size());
    return out;
  }
  if (centers.size() != clouds.size()) throw ShapeError(spec_.name + ": one center list per cloud expected");
  for (std::size_t b = 0; b < clouds.size(); ++b) {
    if (centers[b].empty() || centers[b].size() != centers.front().size()) {
      throw ShapeError(spec_.name + ": center lists must be non-empty and of equal length");
    }
    out.clouds.push_back(select(clouds[b], centers[b]));
  }
  out.feats = group_and_pool(refined, clouds, out.clouds, spec_.radii.front(), spec_.samples.front());
  return out;
}

template <class T>
void ReEncode<T>::collect(std::vector<NamedParameter<T>>& out) const {
  mlp_.collect(out);
}

template <class T>
void ReEncode<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  mlp_.collect_buffers(out);
}

template <class T>
FeaturePropagation<T>::FeaturePropagation(const LayerSpec& spec, Rng& rng)
    : spec_((validate(spec), spec)),
      mlp_(spec.name + ".mlp", spec.total_in(), spec.mlp.front(), spec.n_groups, false, rng) {
  if (spec_.kind != LayerKind::feature_propagation) throw ConfigError(spec_.name + ": not a propagation spec");
}

template <class T>
LevelState<T> FeaturePropagation<T>::forward(const LevelState<T>& coarse, const LevelState<T>& fine_skip,
                                             const RunMode& mode) {
  require_batch(coarse, spec_.name);
  require_batch(fine_skip, spec_.name);
  if (!coarse.feats || coarse.channels() != spec_.in_channels.front()) {
    throw ShapeError(spec_.name + ": coarse input has " + std::to_string(coarse.channels()) +
                     " channels, layer config says " + std::to_string(spec_.in_channels.front()));
  }
  const std::size_t skip = spec_.in_channels.size() > 1 ? spec_.in_channels[1] : 0;
  if (fine_skip.channels() != skip) {
    throw ShapeError(spec_.name + ": skip input has " + std::to_string(fine_skip.channels()) +
                     " channels, layer config says " + std::to_string(skip));
  }
  Var<T> interpolated = interpolate_batch(coarse.clouds, *coarse.feats, fine_skip.clouds);
  Var<T> cat = fine_skip.feats ? concat_channels<T>({interpolated, *fine_skip.feats}) : interpolated;
  LevelState<T> out;
  out.stage = Stage::fp;
  out.level = fine_skip.level;
  out.clouds = fine_skip.clouds;
  out.feats = mlp_.forward(cat, mode);
  return out;
}

template <class T>
void FeaturePropagation<T>::collect(std::vector<NamedParameter<T>>& out) const {
  mlp_.collect(out);
}

template <class T>
void FeaturePropagation<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  mlp_.collect_buffers(out);
}

template <class T>
FullyConnected<T>::FullyConnected(const LayerSpec& spec, Rng& rng)
    : spec_((validate(spec), spec)),
      linear_(spec.name + ".linear", spec.in_channels.front(), spec.mlp.front().front(), 1, rng) {
  if (spec_.kind != LayerKind::fully_connected) throw ConfigError(spec_.name + ": not a fully connected spec");
  if (!spec_.final) norm_.emplace(spec_.name + ".bn", spec_.mlp.front().front());
}

template <class T>
Var<T> FullyConnected<T>::forward(const Var<T>& x, const RunMode& mode) {
  Var<T> h = linear_.forward(x);
  if (spec_.final) return h;
  h = relu(norm_->forward(h, mode));
  if (mode.training && mode.dropout && spec_.dropout > 0.0) {
    if (mode.rng == nullptr) throw Error(spec_.name + ": training-mode dropout needs an rng");
    h = dropout(h, spec_.dropout, true, *mode.rng);
  }
  return h;
}

template <class T>
void FullyConnected<T>::collect(std::vector<NamedParameter<T>>& out) const {
  linear_.collect(out);
  if (norm_) norm_->collect(out);
}

template <class T>
void FullyConnected<T>::collect_buffers(std::vector<NamedBuffer<T>>& out) {
  if (norm_) norm_->collect_buffers(out);
}

#define MARNET_INSTANTIATE(T)                                     \
  template Var<T> reduction<T>(const Var<T>&, std::size_t);       \
  template class GroupedLinear<T>;                                \
  template class BatchNorm<T>;                                    \
  template class SharedMlp<T>;                                    \
  template class SetAbstraction<T>;                               \
  template class CrossReference<T>;                               \
  template class ReEncode<T>;                                     \
  template class FeaturePropagation<T>;                           \
  template class FullyConnected<T>;

MARNET_INSTANTIATE(float)
MARNET_INSTANTIATE(double)
#undef MARNET_INSTANTIATE

}  // namespace marnet::nn
