#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace marnet {

/// counts[truth * n + pred].
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes = 0);

  void add(int truth, int pred);
  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * n_ + pred]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

/// trace / total.
double overall_accuracy(const ConfusionMatrix& m);
/// Per-class recall (NaN for classes without samples).
std::vector<double> class_recall(const ConfusionMatrix& m);
/// Mean recall over classes that occur in the ground truth.
double mean_class_accuracy(const ConfusionMatrix& m);

/// Dataset-wide per-part TP/FP/FN counts.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(std::size_t n_parts = 0);

  void add(std::span<const int> pred, std::span<const int> truth);
  std::size_t parts() const { return tp_.size(); }
  /// IoU per part; NaN when the part is absent from predictions and truth.
  std::vector<double> per_part() const;
  /// Mean IoU over parts present in the ground truth.
  double miou() const;

 private:
  std::vector<std::uint64_t> tp_, fp_, fn_, support_;
};

double miou(std::span<const int> pred, std::span<const int> truth, std::size_t n_parts);

struct MetricsReport {
  std::size_t samples = 0;
  double overall_accuracy = 0.0;
  double mean_class_accuracy = 0.0;
  // Segmentation only: point-wise accuracy and part mIoU.
  bool segmentation = false;
  double miou = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<double> per_part_iou;
  ConfusionMatrix confusion;
  // Averaged class (or per-point part) probabilities, one row per sample
  // (or point), flattened.
  std::vector<double> probabilities;
  std::vector<int> predictions;
};

nlohmann::json to_json(const MetricsReport& report);

}  // namespace marnet
