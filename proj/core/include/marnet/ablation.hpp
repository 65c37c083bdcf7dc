#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marnet/train.hpp"

namespace marnet {

/// One sweep. Sweeps:
///   components  values are variant names: backbone, backbone_da, marnet_no_r,
///               marnet, marnet_voting (default: all five)
///   points      evaluation input sizes of one trained model
///   noise       noise points appended at evaluation
///   groups      group counts applied to the model config
///   levels      backbone depths of the classifier family (complexity only)
struct AblationSpec {
  std::string sweep;
  nlohmann::json values = nlohmann::json::array();
  TrainConfig train;
  DataConfig data;
  // Evaluation settings shared by every row; points defaults to train.points.
  EvalOptions eval;
  // Votes used by the marnet_voting variant.
  std::size_t voting = 10;
  // groups: train each configuration as well as counting its cost.
  bool train_models = false;
  // points / noise: evaluate this checkpoint instead of training one.
  std::string checkpoint;
};

AblationSpec ablation_spec_from_json(const nlohmann::json& j);

struct AblationTable {
  std::vector<std::string> columns;
  // Missing values are null.
  std::vector<std::vector<nlohmann::json>> rows;
};

/// Header row then one line per row; null cells are empty.
std::string to_csv(const AblationTable& table);
nlohmann::json to_json(const AblationTable& table);

AblationTable ablate(const AblationSpec& spec, std::ostream* log = nullptr);

/// Writes results.csv and results.json into `dir`.
void write_results(const AblationTable& table, const std::filesystem::path& dir);

}  // namespace marnet
