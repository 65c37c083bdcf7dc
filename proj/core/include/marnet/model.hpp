#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marnet/layers.hpp"

namespace marnet {

enum class Task { classification, part_segmentation };

const char* to_string(Task task);

/// Declarative description of a whole network. Stage lists are ordered from
/// the first level; `head` holds the fully connected layers (the last one
/// emits logits).
struct ModelConfig {
  std::string name = "marnet";
  Task task = Task::classification;
  // Recorded group count; per-layer values in the specs are authoritative.
  std::size_t n_groups = 1;
  // Classes (classification) or parts (segmentation).
  std::size_t n_outputs = 0;
  // Reduction / identity residuals of the cross-reference and re-encoding
  // stages, and the per-layer backbone residuals.
  bool residual = true;
  // Feed the last backbone level straight into the head.
  bool backbone_only = false;
  // Input size the per-level center counts refer to.
  std::size_t reference_points = 1024;
  std::vector<nn::LayerSpec> bb, fcr, fre, fp, head;
};

/// Checks every layer and the channel chain between stages. Throws
/// ConfigError naming the first offending layer.
void validate(const ModelConfig& config);

/// Sets the group count of every backbone, cross-reference and re-encoding
/// layer (propagation and FC layers stay dense).
void set_groups(ModelConfig& config, std::size_t n_groups);

/// Drops the cross-reference and re-encoding stages; the head then reads
/// the last backbone level. Classification only.
ModelConfig backbone_only(ModelConfig config);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

namespace presets {

/// Multi-scale classifier with 4 backbone levels.
ModelConfig classifier(std::size_t n_classes, std::size_t n_groups = 2);
/// Single-scale lightweight classifier.
ModelConfig lite(std::size_t n_classes);
/// Classifier encoder plus four propagation layers and a point-wise head.
ModelConfig part_segmenter(std::size_t n_parts, std::size_t n_groups = 2);
/// Lite encoder with a narrower propagation decoder.
ModelConfig lite_segmenter(std::size_t n_parts);
/// Classifier with `levels` backbone levels (3..6); widths double per
/// level. levels == 4 reproduces classifier().
ModelConfig with_levels(std::size_t levels, std::size_t n_classes, std::size_t n_groups = 2);

}  // namespace presets

/// Center counts of each set-abstraction level for an n-point input:
/// max(1, floor(out_points * n / reference)), capped by the level input.
std::vector<std::size_t> level_points(const ModelConfig& config, std::size_t n);

struct LayerComplexity {
  std::string name;
  std::size_t parameters = 0;
  std::uint64_t flops = 0;
};

struct ComplexityReport {
  std::size_t parameters = 0;
  std::uint64_t flops = 0;
  std::size_t points = 0;
  std::string convention;
  std::vector<LayerComplexity> layers;
};

/// Analytic parameter and FLOP count for an n-point input (default: the
/// reference size).
ComplexityReport complexity(const ModelConfig& config, std::size_t points = 0);

struct LevelShape {
  nn::Stage stage = nn::Stage::input;
  int level = 0;
  std::size_t channels = 0;
  std::size_t points = 0;
};

template <class T>
struct ForwardResult {
  // [batch, classes] or [batch * points, parts].
  Var<T> logits;
  // Every stage output in execution order: bb, fcr, fre, fp.
  std::vector<nn::LevelState<T>> levels;
  // Output widths of the head layers.
  std::vector<std::size_t> head_widths;

  std::vector<LevelShape> shapes() const;
  const nn::LevelState<T>& find(nn::Stage stage, int level) const;
};

template <class T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// Batched forward; all clouds need the same point count.
  ForwardResult<T> forward(const std::vector<PointSet>& clouds, const nn::RunMode& mode);

  const ModelConfig& config() const { return config_; }
  std::vector<nn::NamedParameter<T>> parameters() const;
  std::vector<nn::NamedBuffer<T>> buffers();
  std::size_t parameter_count() const;

 private:
  ModelConfig config_;
  std::vector<nn::SetAbstraction<T>> bb_;
  std::vector<nn::CrossReference<T>> fcr_;
  std::vector<nn::ReEncode<T>> fre_;
  std::vector<nn::FeaturePropagation<T>> fp_;
  std::vector<nn::FullyConnected<T>> head_;
};

/// Logits [1, classes] of one cloud.
template <class T>
Var<T> forward_classify(Model<T>& model, const PointSet& cloud, const nn::RunMode& mode);

/// Per-point logits [points, parts] of one cloud.
template <class T>
Var<T> forward_segment(Model<T>& model, const PointSet& cloud, const nn::RunMode& mode);

}  // namespace marnet
