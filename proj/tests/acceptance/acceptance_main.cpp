// Acceptance suite: one criterion per section, one pass/fail line each,
// tolerances pinned in code. Exit status is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "mtnet/harness.hpp"
#include "mtnet/io.hpp"

using namespace mtnet;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

double now_s() {
  using clock = std::chrono::steady_clock;
  static const clock::time_point start = clock::now();
  return std::chrono::duration<double>(clock::now() - start).count();
}

void report(const std::string& id, bool pass, const std::string& detail, double elapsed) {
  std::printf("[%s] %s (%.1fs) %s\n", pass ? "PASS" : "FAIL", id.c_str(), elapsed,
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

ModelConfig default_config() { return config_from_json_text(embedded_default_config_json()); }

// Line-by-line transcription of the nested merge scan (1-based indices),
// kept independent of the library implementation.
std::vector<std::pair<int, int>> schedule_transcription(int n) {
  std::vector<std::pair<int, int>> visits;
  int idx1 = 1, idx2 = 0;
  while (idx1 != n) {
    idx2 = idx1;
    while (idx2 != 0) {
      visits.emplace_back(idx1, idx2);
      idx2 = idx2 - 1;
    }
    idx1 = idx1 + 1;
  }
  return visits;
}

void c1_stage_shapes() {
  double t0 = now_s();
  DescribeResult res = run_describe(default_config());
  bool pass = res.reference_applicable && res.matches_reference && res.rows.size() == 10;
  std::string detail = "stage outputs at 1024x2048, exact match";
  if (!pass) {
    detail = "mismatch:";
    const auto& ref = reference_stage_outputs();
    for (size_t i = 0; i < res.rows.size() && i < ref.size(); ++i)
      if (res.rows[i].output != ref[i].second)
        detail += " " + res.rows[i].name + " got '" + res.rows[i].output + "'";
  }
  report("C1 stage-shape reproduction", pass, detail, now_s() - t0);
}

void c2_trace_equivalence() {
  double t0 = now_s();
  bool pass = true;
  std::string detail;
  RngStream rng(7);
  for (int n = 2; n <= 4 && pass; ++n) {
    std::vector<int> channels;
    std::vector<Tensor> scales;
    for (int i = 0; i < n; ++i) {
      int shift = n - 1 - i;
      channels.push_back(4 << shift);
      Tensor s = Tensor::zeros({1, 4 << shift, 8 >> shift, 16 >> shift});
      for (int64_t j = 0; j < s.numel(); ++j) s[j] = rng.uniform(-1.0, 1.0);
      scales.push_back(std::move(s));
    }
    Aggregator agg(channels, rng);
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& s : scales) vars.push_back(tape.leaf(s));
    AggregationTrace trace;
    agg.forward(tape, vars, true, &trace);
    std::vector<std::pair<int, int>> visited;
    for (const auto& app : trace.apps) visited.emplace_back(app.idx1, app.idx2);
    if (visited != schedule_transcription(n) || agg.step_labels() != visited) {
      pass = false;
      detail = "divergence at N=" + std::to_string(n);
    }
    if (n == 3) {
      std::vector<std::pair<int, int>> expect = {{1, 1}, {2, 2}, {2, 1}};
      if (visited != expect || visited.size() != 3) {
        pass = false;
        detail = "N=3 trace is not the 1+2 decode split";
      }
    }
  }
  if (pass) detail = "N in {2,3,4} match the transcription; N=3 = 1+2 applications";
  report("C2 aggregation trace equivalence", pass, detail, now_s() - t0);
}

void c3_delta_reproduction() {
  double t0 = now_s();
  bool pass = true;
  std::string detail;
  int rows = 0;
  for (const char* fixture : {embedded_table2_json(), embedded_table3_json()}) {
    MetricTable table = metric_table_from_json_text(fixture);
    for (const MetricRow& row : table.rows) {
      ++rows;
      double delta = relative_performance(row, table.baseline, table.tasks);
      if (!row.expected_delta || std::abs(delta - *row.expected_delta) > 0.01) {
        pass = false;
        detail += " " + row.method;
      }
    }
  }
  if (pass)
    detail = std::to_string(rows) + " rows within +-0.01 (11 comparison + 5 ablation)";
  else
    detail = "out of tolerance:" + detail;
  report("C3 relative-performance reproduction", pass, detail, now_s() - t0);
}

void c4_gradient_soundness() {
  double t0 = now_s();
  GradcheckReport layers = run_gradcheck_components(standard_gradcheck_components(3));
  GradcheckReport e2e = run_gradcheck_end_to_end(default_config(), 3, 64, 128, 5, 1e-3, 1e-3);
  bool pass = layers.all_pass && e2e.all_pass;
  double worst_layer = 0.0, worst_e2e = 0.0;
  std::string failing;
  for (const auto& e : layers.entries) {
    worst_layer = std::max(worst_layer, e.max_rel_err);
    if (!e.pass) failing += " " + e.name;
  }
  for (const auto& e : e2e.entries) {
    worst_e2e = std::max(worst_e2e, e.max_rel_err);
    if (!e.pass) failing += " " + e.name;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%zu layer probes (worst %.2e, tol 1e-4); end-to-end worst %.2e (tol 1e-3)%s",
                layers.entries.size(), worst_layer, worst_e2e, failing.c_str());
  report("C4 gradient soundness", pass, buf, now_s() - t0);
}

void c5_c6_attention_identities() {
  double t0 = now_s();
  ModelConfig cfg = default_config();
  cfg.input_h = 64;
  cfg.input_w = 128;
  MultiTaskModel model(cfg, 5);
  SyntheticSample sample = generate_synthetic(5, 64, 128, 1, cfg);
  Tape tape;
  ForwardMaps maps = model.forward(tape, tape.leaf(sample.image), false);

  bool pass = true;
  std::string detail;

  // Gates strictly inside (0,1).
  for (int task = 0; task < kNumTasks && pass; ++task) {
    const Tensor& a = tape.value(*maps.attention.alpha[task]);
    for (int64_t i = 0; i < a.numel(); ++i)
      if (!(a[i] > 0.0 && a[i] < 1.0)) {
        pass = false;
        detail = "alpha outside (0,1)";
      }
  }
  const Tensor& beta = tape.value(*maps.attention.beta);
  for (int64_t i = 0; i < beta.numel() && pass; ++i)
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) {
      pass = false;
      detail = "beta outside (0,1)";
    }

  // alpha == 1, beta == 0 reduces to h bit-exactly.
  const Tensor& h = tape.value(maps.fused);
  Var ones = tape.leaf(Tensor::full({1, cfg.fused_channels, 1, 1}, 1.0));
  Var zeros = tape.leaf(Tensor::zeros({1, 1, h.extent(2), h.extent(3)}));
  const Tensor& ident = tape.value(task_adapt(tape, maps.fused, ones, zeros));
  for (int64_t i = 0; i < h.numel() && pass; ++i)
    if (ident[i] != h[i]) {
      pass = false;
      detail = "alpha=1/beta=0 identity is not bit-exact";
    }

  // alpha == 0 leaves exactly the broadcast spatial map.
  Var zero_gate = tape.leaf(Tensor::zeros({1, cfg.fused_channels, 1, 1}));
  const Tensor& only_beta =
      tape.value(task_adapt(tape, maps.fused, zero_gate, *maps.attention.beta));
  for (int64_t c = 0; c < cfg.fused_channels && pass; ++c)
    for (int64_t y = 0; y < h.extent(2) && pass; ++y)
      for (int64_t x = 0; x < h.extent(3); ++x)
        if (only_beta.at4(0, c, y, x) != beta.at4(0, 0, y, x)) {
          pass = false;
          detail = "alpha=0 does not reduce to broadcast beta";
          break;
        }

  // Toggled-off generator is the identity on the model path.
  {
    ModelConfig ident_cfg = cfg;
    ident_cfg.use_channel_attention = false;
    ident_cfg.use_spatial_attention = false;
    MultiTaskModel m2(ident_cfg, 5);
    Tape t2;
    ForwardMaps maps2 = m2.forward(t2, t2.leaf(sample.image), false);
    const Tensor& h2 = t2.value(maps2.fused);
    for (int task = 0; task < kNumTasks && pass; ++task) {
      const Tensor& ht = t2.value(maps2.adapted[task]);
      for (int64_t i = 0; i < h2.numel(); ++i)
        if (ht[i] != h2[i]) {
          pass = false;
          detail = "ablated generator is not the identity";
          break;
        }
    }
  }
  if (pass) detail = "identities bit-exact; gates strictly inside (0,1)";
  report("C5 attention identities", pass, detail, now_s() - t0);

  // Element-level oracle at 100 random coordinates.
  double t1 = now_s();
  bool pass6 = true;
  double worst = 0.0;
  RngStream coords(17);
  for (int task = 0; task < kNumTasks; ++task) {
    const Tensor& alpha = tape.value(*maps.attention.alpha[task]);
    const Tensor& ht = tape.value(maps.adapted[task]);
    for (int probe = 0; probe < 100; ++probe) {
      int64_t c = coords.uniform_int(0, cfg.fused_channels - 1);
      int64_t y = coords.uniform_int(0, h.extent(2) - 1);
      int64_t x = coords.uniform_int(0, h.extent(3) - 1);
      double expect = alpha.at4(0, c, 0, 0) * h.at4(0, c, y, x) + beta.at4(0, 0, y, x);
      double got = ht.at4(0, c, y, x);
      double rel = std::abs(got - expect) / std::max(1e-300, std::abs(expect));
      worst = std::max(worst, rel);
      if (rel >= 1e-12) pass6 = false;
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "300 coordinates, worst relative error %.2e (tol 1e-12)",
                worst);
  report("C6 adaptation element oracle", pass6, buf, now_s() - t1);
}

void c7_overfit() {
  double t0 = now_s();
  ModelConfig cfg = default_config();
  cfg.input_h = 64;
  cfg.input_w = 128;
  OverfitResult res = run_overfit(cfg, 0, 200, 1e-3, 64, 128);
  bool pass = !res.diverged && res.curve.size() == 201;
  double initial = res.curve.empty() ? 0.0 : res.curve.front().total;
  double final_loss = res.curve.empty() ? 0.0 : res.curve.back().total;
  if (pass) pass = final_loss < 0.5 * initial;
  for (const OverfitRow& r : res.curve)
    if (!std::isfinite(r.total)) pass = false;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "loss %.3f -> %.3f over 200 steps (need < %.3f)%s", initial,
                final_loss, 0.5 * initial, res.diverged ? "; DIVERGED" : "");
  report("C7 overfit property", pass, buf, now_s() - t0);
}

void c8_cost_accounting() {
  double t0 = now_s();
  ModelConfig cfg = default_config();
  MultiTaskModel with(cfg, 0);
  ModelConfig off = cfg;
  off.use_channel_attention = false;
  off.use_spatial_attention = false;
  MultiTaskModel without(off, 0);
  int64_t diff = with.param_count() - without.param_count();

  int64_t sem = cfg.low_channels[2];
  int64_t per_task = (sem * cfg.attn_hidden + cfg.attn_hidden) +
                     (static_cast<int64_t>(cfg.attn_hidden) * cfg.fused_channels +
                      cfg.fused_channels);
  int64_t spatial = 3LL * 3 * cfg.high_channels + 1;
  int64_t recount = 3 * per_task + spatial;
  bool pass = diff > 0 && diff == recount;

  Introspection totals = with.totals(cfg.input_h, cfg.input_w);
  double gflops = 2.0 * static_cast<double>(totals.macs) / 1e9;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "attention params %lld == recount %lld; model %.1f M params / %.0f GFLOPs "
                "(reference design: 33.9 M / 219; literal conv stacks, three full-width heads, "
                "and norm/bias accounting widen the totals; informational)",
                static_cast<long long>(diff), static_cast<long long>(recount),
                static_cast<double>(totals.params) / 1e6, gflops);
  report("C8 cost accounting", pass, buf, now_s() - t0);
}

void c9_determinism() {
  double t0 = now_s();
  ModelConfig cfg = default_config();
  cfg.input_h = 64;
  cfg.input_w = 128;
  std::string base = fs::temp_directory_path() / "mtnet_acceptance_det";
  fs::remove_all(base);
  bool pass = true;
  std::string detail = "forward PGMs and overfit CSV byte-identical across reruns";

  ForwardResultFiles a = run_forward(cfg, 9, 64, 128, base + "/a");
  ForwardResultFiles b = run_forward(cfg, 9, 64, 128, base + "/b");
  if (a.pgm.size() != 4) {
    pass = false;
    detail = "expected 4 heatmaps";
  }
  for (size_t i = 0; i < a.pgm.size() && pass; ++i)
    if (read_file(a.pgm[i]) != read_file(b.pgm[i])) {
      pass = false;
      detail = "PGM bytes differ: " + a.pgm[i];
    }
  for (size_t i = 0; i < a.tensors.size() && pass; ++i)
    if (read_file(a.tensors[i]) != read_file(b.tensors[i])) {
      pass = false;
      detail = "tensor bytes differ: " + a.tensors[i];
    }

  if (pass) {
    OverfitResult r1 = run_overfit(cfg, 9, 3, 1e-3, 64, 128);
    OverfitResult r2 = run_overfit(cfg, 9, 3, 1e-3, 64, 128);
    if (r1.csv_text != r2.csv_text) {
      pass = false;
      detail = "overfit CSV differs between reruns";
    }
  }
  fs::remove_all(base);
  report("C9 determinism", pass, detail, now_s() - t0);
}

}  // namespace

int main() {
  std::printf("acceptance suite (tolerances pinned in code)\n");
  c1_stage_shapes();
  c2_trace_equivalence();
  c3_delta_reproduction();
  c4_gradient_soundness();
  c5_c6_attention_identities();
  c7_overfit();
  c8_cost_accounting();
  c9_determinism();
  std::printf("%s: %d criterion(s) failed\n", g_failures == 0 ? "OK" : "NOT OK", g_failures);
  return g_failures;
}
