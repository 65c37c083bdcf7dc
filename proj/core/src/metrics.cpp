#include "marnet/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "marnet/errors.hpp"

namespace marnet {

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes) : n_(n_classes), counts_(n_classes * n_classes, 0) {}

void ConfusionMatrix::add(int truth, int pred) {
  if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= n_ || static_cast<std::size_t>(pred) >= n_) {
    throw DataError("confusion matrix: label pair (" + std::to_string(truth) + ", " + std::to_string(pred) +
                    ") outside " + std::to_string(n_) + " classes");
  }
  ++counts_[static_cast<std::size_t>(truth) * n_ + static_cast<std::size_t>(pred)];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < n_; ++i) t += at(i, i);
  return t;
}

double overall_accuracy(const ConfusionMatrix& m) {
  const auto total = m.total();
  return total == 0 ? 0.0 : static_cast<double>(m.trace()) / static_cast<double>(total);
}

std::vector<double> class_recall(const ConfusionMatrix& m) {
  std::vector<double> r(m.classes(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t t = 0; t < m.classes(); ++t) {
    std::uint64_t row = 0;
    for (std::size_t p = 0; p < m.classes(); ++p) row += m.at(t, p);
    if (row > 0) r[t] = static_cast<double>(m.at(t, t)) / static_cast<double>(row);
  }
  return r;
}

double mean_class_accuracy(const ConfusionMatrix& m) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double r : class_recall(m)) {
    if (std::isnan(r)) continue;
    sum += r;
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

IoUAccumulator::IoUAccumulator(std::size_t n_parts)
    : tp_(n_parts, 0), fp_(n_parts, 0), fn_(n_parts, 0), support_(n_parts, 0) {}

void IoUAccumulator::add(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("miou: " + std::to_string(pred.size()) + " predictions for " + std::to_string(truth.size()) +
                     " labels");
  }
  const std::size_t n = parts();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], t = truth[i];
    if (p < 0 || t < 0 || static_cast<std::size_t>(p) >= n || static_cast<std::size_t>(t) >= n) {
      throw DataError("miou: label outside " + std::to_string(n) + " parts");
    }
    ++support_[t];
    if (p == t) {
      ++tp_[t];
    } else {
      ++fp_[p];
      ++fn_[t];
    }
  }
}

std::vector<double> IoUAccumulator::per_part() const {
  std::vector<double> iou(parts(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < parts(); ++c) {
    const auto denom = tp_[c] + fp_[c] + fn_[c];
    if (denom > 0) iou[c] = static_cast<double>(tp_[c]) / static_cast<double>(denom);
  }
  return iou;
}

double IoUAccumulator::miou() const {
  const auto iou = per_part();
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < parts(); ++c) {
    if (support_[c] == 0) continue;
    sum += iou[c];
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

double miou(std::span<const int> pred, std::span<const int> truth, std::size_t n_parts) {
  IoUAccumulator acc(n_parts);
  acc.add(pred, truth);
  return acc.miou();
}

namespace {

nlohmann::json nan_to_null(const std::vector<double>& v) {
  auto a = nlohmann::json::array();
  for (double x : v) a.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  return a;
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["samples"] = r.samples;
  j["overall_accuracy"] = r.overall_accuracy;
  j["mean_class_accuracy"] = r.mean_class_accuracy;
  j["per_class_accuracy"] = nan_to_null(r.per_class_accuracy);
  if (r.segmentation) {
    j["miou"] = r.miou;
    j["per_part_iou"] = nan_to_null(r.per_part_iou);
  }
  auto rows = nlohmann::json::array();
  for (std::size_t t = 0; t < r.confusion.classes(); ++t) {
    auto row = nlohmann::json::array();
    for (std::size_t p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

}  // namespace marnet
