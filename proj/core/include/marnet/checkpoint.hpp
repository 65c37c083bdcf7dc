#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "marnet/errors.hpp"
#include "marnet/model.hpp"
#include "marnet/optim.hpp"

namespace marnet {

enum class CheckpointErrc {
  io = 1,
  bad_magic,
  bad_version,
  truncated,
  trailing_data,
  duplicate_name,
  bad_entry,
  missing_entry,
  unexpected_entry,
  shape_mismatch,
};

const char* to_string(CheckpointErrc code);

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what);
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

/// One named float32 array.
struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct TrainingState {
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  // Batch norm running statistics.
  std::vector<TensorEntry> buffers;
  // Adam first and second moments, named after their parameters.
  std::vector<TensorEntry> adam_m;
  std::vector<TensorEntry> adam_v;
};

/// Layout (all integers little-endian):
///   "MARC" u32 version
///   u32 length, model config JSON
///   u32 count, entries
///   "TRST" u64 epoch, u64 step, u32 count + entries (buffers),
///   u32 count + entries (adam m), u32 count + entries (adam v)
/// entry: u32 name length, UTF-8 name, u32 rank, u64 extents, f32 values.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_json;
  std::vector<TensorEntry> parameters;
  TrainingState state;
};

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters, buffers and (optionally) optimizer state of a model.
template <class T>
Checkpoint capture(Model<T>& model, const Adam<T>* optimizer = nullptr, std::uint64_t epoch = 0);

/// Copies parameters and buffers into a model built from the same config.
/// Every model parameter must be present with a matching shape.
template <class T>
void restore(Model<T>& model, const Checkpoint& checkpoint);

/// Restores optimizer moments and step count.
template <class T>
void restore_optimizer(Adam<T>& optimizer, const Model<T>& model, const Checkpoint& checkpoint);

/// Builds a model from the stored config and restores it.
template <class T>
Model<T> load_model(const Checkpoint& checkpoint);

}  // namespace marnet
