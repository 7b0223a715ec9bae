#include "mtnet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include <nlohmann/json.hpp>

#include "embedded_fixtures.hpp"
#include "mtnet/io.hpp"
#include "mtnet/optim.hpp"

namespace mtnet {

namespace fs = std::filesystem;
using nlohmann::json;

const char* embedded_table2_json() { return embedded::kTable2Json; }
const char* embedded_table3_json() { return embedded::kTable3Json; }
const char* embedded_default_config_json() { return embedded::kDefaultConfigJson; }

namespace {

// Shortest round-trip-exact decimal form; keeps text outputs byte-stable.
std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = std::strtod(buf, nullptr);
  for (int prec = 1; prec <= 16; ++prec) {
    char t[40];
    std::snprintf(t, sizeof(t), "%.*g", prec, v);
    if (std::strtod(t, nullptr) == back) return t;
  }
  return buf;
}

std::string fmt_fixed(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- describe

const std::vector<std::pair<std::string, std::string>>& reference_stage_outputs() {
  static const std::vector<std::pair<std::string, std::string>> kRef = {
      {"stem", "256 × 512"},
      {"layer1", "256 × 512"},
      {"layer2", "128 × 256"},
      {"layer3", "64 × 128, 128 × 256"},
      {"layer4", "32 × 64, 128 × 256"},
      {"layer5", "16 × 32, 128 × 256"},
      {"decode layer1", "32 × 64, 128 × 256"},
      {"decode layer2", "64 × 128, 128 × 256"},
      {"fusion", "128 × 256"},
      {"head (MTL)", "1024 × 2048"},
  };
  return kRef;
}

DescribeResult run_describe(const ModelConfig& cfg) {
  MultiTaskModel model(cfg, /*seed=*/0);
  DescribeResult res;
  res.rows = model.stage_table(cfg.input_h, cfg.input_w);
  for (const StageRow& r : res.rows) {
    res.totals.params += r.params;
    res.totals.macs += r.macs;
  }

  size_t name_w = 5, out_w = 6;
  for (const StageRow& r : res.rows) {
    name_w = std::max(name_w, r.name.size());
    // Output strings hold multi-byte signs; measure display width in code
    // points (all characters involved are single-column).
    size_t cp = 0;
    for (char c : r.output)
      if ((c & 0xc0) != 0x80) ++cp;
    out_w = std::max(out_w, cp);
  }

  std::ostringstream os;
  auto pad = [&](const std::string& s, size_t w, size_t display) {
    os << s;
    for (size_t i = display; i < w; ++i) os << ' ';
  };
  pad("stage", name_w, 5);
  os << "  ";
  pad("output", out_w, 6);
  os << "  " << "params" << "        " << "MACs" << "\n";
  for (const StageRow& r : res.rows) {
    pad(r.name, name_w, r.name.size());
    os << "  ";
    size_t cp = 0;
    for (char c : r.output)
      if ((c & 0xc0) != 0x80) ++cp;
    pad(r.output, out_w, cp);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "  %10lld  %14lld", static_cast<long long>(r.params),
                  static_cast<long long>(r.macs));
    os << buf << "\n";
  }
  os << "total params: " << res.totals.params << " ("
     << fmt_fixed(static_cast<double>(res.totals.params) / 1e6, 2) << " M)\n";
  os << "total MACs:   " << res.totals.macs
     << " (GFLOPs: " << fmt_fixed(2.0 * static_cast<double>(res.totals.macs) / 1e9, 1) << ")\n";
  res.text = os.str();

  json j;
  j["input"] = {cfg.input_h, cfg.input_w};
  j["stages"] = json::array();
  for (const StageRow& r : res.rows)
    j["stages"].push_back(
        {{"stage", r.name}, {"output", r.output}, {"params", r.params}, {"macs", r.macs}});
  j["total_params"] = res.totals.params;
  j["total_macs"] = res.totals.macs;
  j["gflops"] = 2.0 * static_cast<double>(res.totals.macs) / 1e9;
  res.json_text = j.dump(2) + "\n";

  // The exit-code contract compares against the reference layout whenever
  // the config requests the reference architecture at full resolution.
  ModelConfig ref;
  res.reference_applicable =
      cfg.input_h == ref.input_h && cfg.input_w == ref.input_w && cfg.use_high_branch &&
      cfg.use_aggregation && cfg.stem_channels == ref.stem_channels &&
      cfg.layer1_channels == ref.layer1_channels && cfg.layer2_channels == ref.layer2_channels &&
      cfg.low_channels == ref.low_channels && cfg.high_channels == ref.high_channels;
  if (res.reference_applicable) {
    const auto& ref_rows = reference_stage_outputs();
    res.matches_reference = res.rows.size() == ref_rows.size();
    for (size_t i = 0; res.matches_reference && i < ref_rows.size(); ++i)
      res.matches_reference = res.rows[i].name == ref_rows[i].first &&
                              res.rows[i].output == ref_rows[i].second;
  }
  return res;
}

// ---------------------------------------------------------------- forward

ForwardResultFiles run_forward(const ModelConfig& cfg, uint64_t seed, int64_t input_h,
                               int64_t input_w, const std::string& out_dir,
                               const std::string& input_file) {
  fs::create_directories(out_dir);
  MultiTaskModel model(cfg, seed);

  Tensor image;
  if (!input_file.empty()) {
    image = read_tensor(input_file);
    if (image.rank() != 4)
      throw IoError("input tensor must be 4-D (B,C,H,W), got " + image.shape_string());
  } else {
    image = generate_synthetic(seed, input_h, input_w, 1, cfg).image;
  }

  Tape tape;
  Var in = tape.leaf(image, false);
  ForwardMaps maps = model.forward(tape, in, /*training=*/false);

  ForwardResultFiles files;
  auto dump = [&](const std::string& name, Var v, bool pgm) {
    const Tensor& t = tape.value(v);
    std::string tpath = out_dir + "/" + name + ".tnsr";
    write_tensor(tpath, t);
    files.tensors.push_back(tpath);
    if (pgm) {
      std::string ppath = out_dir + "/" + name + ".pgm";
      write_pgm(ppath, heatmap_bytes(t), t.extent(3), t.extent(2));
      files.pgm.push_back(ppath);
    }
  };

  dump("h", maps.fused, true);
  for (int task = 0; task < kNumTasks; ++task) {
    std::string suffix = kTaskNames[static_cast<size_t>(task)];
    dump("h_" + suffix, maps.adapted[static_cast<size_t>(task)], true);
    if (maps.attention.alpha[static_cast<size_t>(task)])
      dump("alpha_" + suffix, *maps.attention.alpha[static_cast<size_t>(task)], false);
  }
  if (maps.attention.beta) dump("beta", *maps.attention.beta, false);
  return files;
}

// ---------------------------------------------------------------- overfit

OverfitResult run_overfit(const ModelConfig& cfg, uint64_t seed, int64_t steps, double base_lr,
                          int64_t input_h, int64_t input_w, double poly_power) {
  if (steps < 0) throw ValueError("overfit: steps must be >= 0");
  MultiTaskModel model(cfg, seed);
  SyntheticSample sample = generate_synthetic(seed, input_h, input_w, 1, cfg);
  AdamOptimizer opt(model.parameters());

  OverfitResult res;
  auto eval_losses = [&](bool training) -> std::optional<OverfitRow> {
    Tape tape;
    Var in = tape.leaf(sample.image, false);
    ForwardMaps maps = model.forward(tape, in, training);
    ModelLosses losses = model.loss(tape, maps, sample.targets);
    OverfitRow row;
    row.det = tape.value(losses.det)[0];
    row.seg = tape.value(losses.seg)[0];
    row.dep = tape.value(losses.dep)[0];
    row.total = tape.value(losses.total)[0];
    if (!std::isfinite(row.total)) return std::nullopt;
    if (training) {
      model.zero_grads();
      tape.backward(losses.total);
    }
    return row;
  };

  for (int64_t step = 0; step < steps; ++step) {
    double lr = polynomial_lr(base_lr, step, steps, poly_power);
    std::optional<OverfitRow> row;
    try {
      row = eval_losses(true);
    } catch (const ValueError&) {
      row = std::nullopt;  // non-finite component
    }
    if (!row) {
      res.diverged = true;
      res.diverged_step = step;
      break;
    }
    row->step = step;
    row->lr = lr;
    res.curve.push_back(*row);
    opt.step(lr);
  }
  if (!res.diverged) {
    std::optional<OverfitRow> final_row;
    try {
      final_row = eval_losses(false);
    } catch (const ValueError&) {
      final_row = std::nullopt;
    }
    if (!final_row) {
      res.diverged = true;
      res.diverged_step = steps;
    } else {
      final_row->step = steps;
      final_row->lr = 0.0;  // no further update
      res.curve.push_back(*final_row);
    }
  }

  std::ostringstream csv;
  csv << "step,lr,loss_det,loss_seg,loss_dep,loss_total\n";
  for (const OverfitRow& r : res.curve) {
    csv << r.step << "," << fmt_double(r.lr) << "," << fmt_double(r.det) << ","
        << fmt_double(r.seg) << "," << fmt_double(r.dep) << "," << fmt_double(r.total) << "\n";
  }
  res.csv_text = csv.str();
  return res;
}

// ---------------------------------------------------------------- metrics

MetricsReport run_metrics(const MetricTable& table, double golden_tolerance) {
  MetricsReport rep;
  std::ostringstream os;
  size_t name_w = 6;
  for (const MetricRow& r : table.rows) name_w = std::max(name_w, r.method.size());

  os << "baseline: " << table.baseline.method << " (";
  for (size_t i = 0; i < table.tasks.size(); ++i) {
    if (i) os << ", ";
    os << table.tasks[i].metric << " " << fmt_double(table.baseline.values.at(table.tasks[i].name));
  }
  os << ")\n";

  json jrows = json::array();
  for (const MetricRow& r : table.rows) {
    MetricsReport::Row row;
    row.method = r.method;
    row.delta = relative_performance(r, table.baseline, table.tasks);
    row.expected = r.expected_delta;
    if (row.expected)
      row.within_tolerance = std::abs(row.delta - *row.expected) <= golden_tolerance;
    rep.all_within_tolerance = rep.all_within_tolerance && row.within_tolerance;

    os << r.method;
    for (size_t i = r.method.size(); i < name_w; ++i) os << ' ';
    os << "  delta " << (row.delta >= 0 ? "+" : "") << fmt_fixed(row.delta, 2) << "%";
    if (row.expected) {
      os << "  (reference " << (*row.expected >= 0 ? "+" : "") << fmt_fixed(*row.expected, 2)
         << ", " << (row.within_tolerance ? "ok" : "MISMATCH") << ")";
    }
    os << "\n";

    json jr = {{"method", r.method}, {"delta", row.delta}};
    if (row.expected) {
      jr["expected_delta"] = *row.expected;
      jr["within_tolerance"] = row.within_tolerance;
    }
    jrows.push_back(jr);
    rep.rows.push_back(std::move(row));
  }
  rep.text = os.str();
  json j;
  j["baseline"] = table.baseline.method;
  j["rows"] = jrows;
  rep.json_text = j.dump(2) + "\n";
  return rep;
}

// ---------------------------------------------------------------- synth

std::vector<std::string> run_synth(const ModelConfig& cfg, uint64_t seed, int64_t input_h,
                                   int64_t input_w, const std::string& out_dir) {
  fs::create_directories(out_dir);
  SyntheticSample s = generate_synthetic(seed, input_h, input_w, 1, cfg);
  std::vector<std::string> files;
  auto put = [&](const std::string& name, const Tensor& t) {
    std::string path = out_dir + "/" + name + ".tnsr";
    write_tensor(path, t);
    files.push_back(path);
  };
  put("image", s.image);
  put("seg_labels", s.targets.seg_labels);
  put("depth", s.targets.depth);
  put("depth_mask", s.targets.depth_mask);
  write_detection_targets(out_dir + "/det", s.targets.det);
  files.push_back(out_dir + "/det/targets.json");
  return files;
}

}  // namespace mtnet
