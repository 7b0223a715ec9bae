#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtnet/gradcheck.hpp"
#include "mtnet/metrics.hpp"
#include "mtnet/model.hpp"
#include "mtnet/synthetic.hpp"

namespace mtnet {

// Embedded copies of the shipped fixtures (data/), so the binaries do not
// depend on a source checkout.
const char* embedded_table2_json();
const char* embedded_table3_json();
const char* embedded_default_config_json();

// ---------------------------------------------------------------- describe

struct DescribeResult {
  std::vector<StageRow> rows;
  Introspection totals;
  std::string text;       // aligned table, byte-stable across runs
  std::string json_text;
  /// Set when the stage output column matches the reference layout for the
  /// default architecture at 1024x2048 (the describe exit-code contract).
  bool matches_reference = false;
  bool reference_applicable = false;
};

DescribeResult run_describe(const ModelConfig& cfg);

/// Stage name -> expected output string for the default architecture at
/// 1024x2048 input.
const std::vector<std::pair<std::string, std::string>>& reference_stage_outputs();

// ---------------------------------------------------------------- forward

struct ForwardResultFiles {
  std::vector<std::string> pgm;
  std::vector<std::string> tensors;
};

/// Runs inference on a seeded synthetic image (or a tensor-container file
/// when input_file is set) and writes heatmaps plus activation dumps.
ForwardResultFiles run_forward(const ModelConfig& cfg, uint64_t seed, int64_t input_h,
                               int64_t input_w, const std::string& out_dir,
                               const std::string& input_file = {});

// ---------------------------------------------------------------- gradcheck

struct GradcheckComponent {
  std::string name;
  Tensor probe;
  double eps = 1e-3;
  double tolerance = 1e-4;
  /// Composite layers hide relu kinks that input sampling cannot avoid.
  /// When the central difference at a coordinate disagrees with the
  /// recorded gradient, a kink-tolerant component retries against the
  /// one-sided differences: at a kink-adjacent point the gradient must
  /// match the slope on its own side, which a crossing step cannot see.
  bool kink_fallback = false;
  ScalarFn fn;
};

struct GradcheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  int64_t coords_checked = 0;
  int64_t coords_one_sided = 0;  // verified via the kink fallback
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool all_pass = true;
  std::string text;
};

/// Per-layer-kind probes (every op, layer, attention head, and loss), with
/// inputs sampled away from activation kinks.
std::vector<GradcheckComponent> standard_gradcheck_components(uint64_t seed);
GradcheckReport run_gradcheck_components(const std::vector<GradcheckComponent>& components);

/// Samples parameter tensors per architecture group and central-differences
/// the full task loss along each tensor's own gradient direction at desk
/// scale (the directional derivative there equals the gradient norm, which
/// keeps the signal far above forward round-off). The step per probe is
/// loss_delta / |g|, targeting a fixed loss displacement: normalization
/// layers create curvature pockets where enormous gradients hold only in a
/// tiny neighborhood. Steps that cross a relu kink fall back to one-sided
/// differences.
GradcheckReport run_gradcheck_end_to_end(const ModelConfig& cfg, uint64_t seed, int64_t input_h,
                                         int64_t input_w, int samples_per_group,
                                         double loss_delta, double tolerance);

/// Per-layer probes plus the end-to-end pass (the CLI surface).
GradcheckReport run_gradcheck(const ModelConfig& cfg, uint64_t seed, bool per_layer_only);

// ---------------------------------------------------------------- overfit

struct OverfitRow {
  int64_t step = 0;
  double lr = 0.0;
  double det = 0.0, seg = 0.0, dep = 0.0, total = 0.0;
};

struct OverfitResult {
  std::vector<OverfitRow> curve;  // steps+1 rows; last row is the final loss
  bool diverged = false;
  int64_t diverged_step = -1;
  std::string csv_text;
};

OverfitResult run_overfit(const ModelConfig& cfg, uint64_t seed, int64_t steps, double base_lr,
                          int64_t input_h, int64_t input_w, double poly_power = 0.9);

// ---------------------------------------------------------------- metrics

struct MetricsReport {
  struct Row {
    std::string method;
    double delta = 0.0;
    std::optional<double> expected;
    bool within_tolerance = true;
  };
  std::vector<Row> rows;
  bool all_within_tolerance = true;
  std::string text;
  std::string json_text;
};

MetricsReport run_metrics(const MetricTable& table, double golden_tolerance = 0.01);

// ---------------------------------------------------------------- synth

std::vector<std::string> run_synth(const ModelConfig& cfg, uint64_t seed, int64_t input_h,
                                   int64_t input_w, const std::string& out_dir);

}  // namespace mtnet
