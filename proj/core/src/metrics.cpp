#include "mtnet/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mtnet {

using nlohmann::json;

namespace {

MetricRow parse_row(const json& j) {
  MetricRow r;
  r.method = j.at("method").get<std::string>();
  for (const auto& [key, val] : j.at("values").items()) r.values[key] = val.get<double>();
  if (auto it = j.find("expected_delta"); it != j.end()) r.expected_delta = it->get<double>();
  return r;
}

}  // namespace

MetricTable metric_table_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("metric table parse error: ") + e.what());
  }
  MetricTable t;
  try {
    for (const auto& jt : j.at("tasks")) {
      MetricTask task;
      task.name = jt.at("name").get<std::string>();
      task.metric = jt.value("metric", task.name);
      task.lower_is_better = jt.at("lower_is_better").get<bool>();
      t.tasks.push_back(task);
    }
    t.baseline = parse_row(j.at("baseline"));
    for (const auto& jr : j.at("rows")) t.rows.push_back(parse_row(jr));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed metric table: ") + e.what());
  }
  if (t.tasks.empty()) throw ConfigError("metric table lists no tasks");
  return t;
}

MetricTable load_metric_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open metric table: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return metric_table_from_json_text(ss.str());
}

double relative_performance(const MetricRow& row, const MetricRow& baseline,
                            const std::vector<MetricTask>& tasks) {
  if (tasks.empty()) throw ValueError("relative_performance: no tasks");
  double acc = 0.0;
  for (const MetricTask& task : tasks) {
    auto mi = row.values.find(task.name);
    auto bi = baseline.values.find(task.name);
    if (mi == row.values.end() || bi == baseline.values.end())
      throw ValueError("relative_performance: task '" + task.name +
                       "' missing from row or baseline");
    double base = bi->second;
    if (base == 0.0)
      throw ValueError("relative_performance: zero baseline for task '" + task.name + "'");
    double rel = (mi->second - base) / base;
    acc += task.lower_is_better ? -rel : rel;
  }
  return 100.0 / static_cast<double>(tasks.size()) * acc;
}

double mean_iou(const Tensor& pred, const Tensor& gt, int num_classes, int ignore_index) {
  if (!pred.same_shape(gt))
    throw ShapeError("mean_iou: prediction " + pred.shape_string() + " vs ground truth " +
                     gt.shape_string());
  if (num_classes < 1) throw ValueError("mean_iou: num_classes must be positive");
  std::vector<int64_t> inter(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> pred_count(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> gt_count(static_cast<size_t>(num_classes), 0);
  for (int64_t i = 0; i < pred.numel(); ++i) {
    int64_t g = static_cast<int64_t>(gt[i]);
    if (g == ignore_index) continue;
    int64_t p = static_cast<int64_t>(pred[i]);
    if (g < 0 || g >= num_classes)
      throw ValueError("mean_iou: ground-truth label " + std::to_string(g) + " outside [0," +
                       std::to_string(num_classes) + ")");
    if (p < 0 || p >= num_classes)
      throw ValueError("mean_iou: predicted label " + std::to_string(p) + " outside [0," +
                       std::to_string(num_classes) + ")");
    gt_count[static_cast<size_t>(g)]++;
    pred_count[static_cast<size_t>(p)]++;
    if (p == g) inter[static_cast<size_t>(g)]++;
  }
  double acc = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    int64_t uni = gt_count[static_cast<size_t>(c)] + pred_count[static_cast<size_t>(c)] -
                  inter[static_cast<size_t>(c)];
    if (uni == 0) continue;  // class absent from both sides
    acc += static_cast<double>(inter[static_cast<size_t>(c)]) / static_cast<double>(uni);
    ++present;
  }
  return present > 0 ? acc / static_cast<double>(present) : 1.0;
}

double rmse(const Tensor& pred, const Tensor& gt, const Tensor& valid_mask) {
  if (!pred.same_shape(gt) || !pred.same_shape(valid_mask))
    throw ShapeError("rmse: shapes differ: " + pred.shape_string() + ", " + gt.shape_string() +
                     ", " + valid_mask.shape_string());
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (valid_mask[i] == 0.0) continue;
    double d = pred[i] - gt[i];
    acc += d * d;
    ++count;
  }
  if (count == 0) throw ValueError("rmse: empty valid mask");
  return std::sqrt(acc / static_cast<double>(count));
}

}  // namespace mtnet
