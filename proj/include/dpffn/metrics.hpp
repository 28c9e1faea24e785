#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "dpffn/json_util.hpp"

namespace dpffn {

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // rows = truth, cols = prediction
  std::vector<double> per_class_accuracy;
  std::size_t params = 0;
  std::size_t flops = 0;
  std::size_t samples = 0;
  std::optional<double> snr_db;
  std::optional<double> missing_rate;
};

struct ModelCosts {
  std::size_t params = 0;
  std::size_t flops = 0;
};

/// Accuracy, confusion matrix and per-class accuracy. Classes with no
/// samples report 0 per-class accuracy.
inline EvalReport evaluate_metrics(const std::vector<int>& predictions, const std::vector<int>& labels,
                                   std::size_t num_classes, ModelCosts costs = {}) {
  if (predictions.size() != labels.size()) throw DataError("predictions and labels differ in length");
  if (predictions.empty()) throw DataError("cannot evaluate metrics on an empty set");
  EvalReport r;
  r.confusion.assign(num_classes, std::vector<std::int64_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || static_cast<std::size_t>(t) >= num_classes || p < 0 || static_cast<std::size_t>(p) >= num_classes)
      throw DataError("class index out of range in metrics");
    ++r.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
    if (t == p) ++correct;
  }
  r.samples = labels.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  r.per_class_accuracy.resize(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::int64_t row = 0;
    for (auto v : r.confusion[c]) row += v;
    if (row > 0) r.per_class_accuracy[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(row);
  }
  r.params = costs.params;
  r.flops = costs.flops;
  return r;
}

inline void to_json(Json& j, const EvalReport& r) {
  j = Json{{"accuracy", r.accuracy},
           {"confusion", r.confusion},
           {"per_class_accuracy", r.per_class_accuracy},
           {"params", r.params},
           {"flops", r.flops},
           {"samples", r.samples}};
  if (r.snr_db) j["snr_db"] = *r.snr_db;
  if (r.missing_rate) j["missing_rate"] = *r.missing_rate;
}

}  // namespace dpffn
