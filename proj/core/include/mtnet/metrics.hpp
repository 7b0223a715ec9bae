#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtnet/tensor.hpp"

namespace mtnet {

struct MetricTask {
  std::string name;         // task key, e.g. "det"
  std::string metric;       // display name, e.g. "DS"
  bool lower_is_better = false;
};

struct MetricRow {
  std::string method;
  std::map<std::string, double> values;        // task key -> metric value
  std::optional<double> expected_delta;        // optional golden value
};

/// Per-method metric values plus the single-task baseline used for the
/// averaged relative performance.
struct MetricTable {
  std::vector<MetricTask> tasks;
  MetricRow baseline;
  std::vector<MetricRow> rows;
};

MetricTable metric_table_from_json_text(const std::string& text);
MetricTable load_metric_table(const std::string& path);

/// Averaged relative performance vs the single-task baseline, in percent:
/// (100/|T|) * sum_t (-1)^{l_t} (M_t - M_t^single) / M_t^single.
/// Errors on a zero baseline value or on mismatched task sets.
double relative_performance(const MetricRow& row, const MetricRow& baseline,
                            const std::vector<MetricTask>& tasks);

/// Mean over classes of |intersection| / |union|, computed from integer
/// label maps. Classes absent from both prediction and ground truth are
/// excluded from the mean; pixels labeled ignore_index are excluded
/// entirely. Label maps must have identical shapes.
double mean_iou(const Tensor& pred, const Tensor& gt, int num_classes, int ignore_index);

/// Root mean square error over mask-selected pixels; errors on empty mask.
double rmse(const Tensor& pred, const Tensor& gt, const Tensor& valid_mask);

}  // namespace mtnet
