#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "marnet/checkpoint.hpp"
#include "marnet/data.hpp"
#include "marnet/metrics.hpp"
#include "marnet/model.hpp"

namespace marnet {

/// Where the clouds come from: a synthetic generator or two manifests.
struct DataConfig {
  // shapes | hemisphere | torus | manifest
  std::string kind = "shapes";
  // Total clouds per split (shapes: a multiple of 4).
  std::size_t train_size = 200;
  std::size_t test_size = 80;
  std::size_t points = 256;
  // Points per test cloud; 0 means `points`.
  std::size_t test_points = 0;
  std::uint64_t seed = 1;
  std::string train_manifest;
  std::string test_manifest;
};

struct TrainConfig {
  double lr = 0.001;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  double lr_decay = 0.7;
  std::size_t decay_every = 20;
  std::size_t epochs = 60;
  std::uint64_t seed = 1;
  bool augment = true;
  // Points fed to the network; larger clouds are subsampled.
  std::size_t points = 1024;
  // Validate every this many epochs (0: never).
  std::size_t eval_every = 1;
  ModelConfig model;
};

/// lr * decay^floor(epoch / decay_every), epochs counted from 0.
double learning_rate(const TrainConfig& config, std::size_t epoch);

void validate(const TrainConfig& config);

/// "model" may be a full model config or {"preset": name, "n_outputs": n,
/// "n_groups": g, "residual": b, "backbone_only": b}.
ModelConfig model_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DataConfig& config);
DataConfig data_config_from_json(const nlohmann::json& j);

/// Train and test splits.
std::pair<data::Dataset, data::Dataset> load_data(const DataConfig& config);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  // Validation OA (classification) or mIoU (segmentation); < 0 if skipped.
  double validation = -1.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;
  std::size_t best_epoch = 0;
  double best_metric = -1.0;
  double seconds = 0.0;
};

/// Trains `model` in place with Adam. The best checkpoint is the epoch with
/// the highest validation metric (the final state without validation data).
TrainResult fit(Model<float>& model, const TrainConfig& config, const data::Dataset& train_set,
                const data::Dataset* validation = nullptr, std::ostream* log = nullptr);

/// Builds the model from config.model with config.seed, then fits.
TrainResult train(const TrainConfig& config, const data::Dataset& train_set,
                  const data::Dataset* validation = nullptr, std::ostream* log = nullptr);

struct EvalOptions {
  // Forward passes per sample; pass 0 is never augmented.
  std::size_t voting = 1;
  bool augment_votes = true;
  // Network input size; larger clouds are FPS-subsampled. 0: as stored.
  std::size_t points = 0;
  // Uniform noise points appended after subsampling.
  std::size_t noise = 0;
  std::uint64_t seed = 7;
  std::size_t batch_size = 16;
};

nlohmann::json to_json(const EvalOptions& options);
EvalOptions eval_options_from_json(const nlohmann::json& j);

MetricsReport evaluate(Model<float>& model, const data::Dataset& dataset, const EvalOptions& options = {});

/// Eval-mode logits of a batch of equally sized clouds (no gradient).
Tensor<float> predict(Model<float>& model, const std::vector<PointSet>& clouds);

struct BenchOptions {
  std::size_t batch_size = 1;
  std::size_t points = 1024;
  std::size_t warmup = 3;
  std::size_t iterations = 20;
  std::uint64_t seed = 1;
};

struct BenchResult {
  double ms_per_sample = 0.0;  // median batch time / batch size
  double ms_per_batch = 0.0;   // median
  std::vector<double> batch_ms;
  std::size_t peak_bytes = 0;  // tensor high-water mark during timed runs
};

BenchResult bench(Model<float>& model, const BenchOptions& options);

}  // namespace marnet
