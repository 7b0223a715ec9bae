#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mtnet/harness.hpp"
#include "mtnet/io.hpp"
#include "test_util.hpp"

using namespace mtnet;
using mtnet::test::small_config;

namespace fs = std::filesystem;

TEST_CASE("describe on the default config matches the reference outputs") {
  ModelConfig cfg = config_from_json_text(embedded_default_config_json());
  DescribeResult res = run_describe(cfg);
  CHECK(res.reference_applicable);
  CHECK(res.matches_reference);
  REQUIRE(res.rows.size() == 10);
  const auto& ref = reference_stage_outputs();
  for (size_t i = 0; i < ref.size(); ++i) {
    CHECK(res.rows[i].name == ref[i].first);
    CHECK(res.rows[i].output == ref[i].second);
  }
}

TEST_CASE("describe text output is byte-identical to the committed golden") {
  ModelConfig cfg = config_from_json_text(embedded_default_config_json());
  DescribeResult res = run_describe(cfg);
  CHECK(res.text == read_file(test::data_path("golden/describe_default.txt")));
}

TEST_CASE("describe at 128x256 scales every stage by 1/8") {
  ModelConfig cfg = config_from_json_text(embedded_default_config_json());
  cfg.input_h = 128;
  cfg.input_w = 256;
  DescribeResult res = run_describe(cfg);
  REQUIRE(res.rows.size() == 10);
  CHECK(res.rows[0].output == "32 × 64");
  CHECK(res.rows[5].output == "2 × 4, 16 × 32");
  CHECK(res.rows[9].output == "128 × 256");  // head back at input resolution
  CHECK(!res.reference_applicable);
}

TEST_CASE("attention off strictly reduces the parameter count by the recounted sum") {
  ModelConfig cfg = small_config();
  MultiTaskModel with(cfg, 0);
  ModelConfig off = cfg;
  off.use_channel_attention = false;
  off.use_spatial_attention = false;
  MultiTaskModel without(off, 0);
  int64_t diff = with.param_count() - without.param_count();
  CHECK(diff > 0);
  // Independent recount from the configured dimensions.
  int64_t sem = cfg.low_channels[2];
  int64_t per_task = (sem * cfg.attn_hidden + cfg.attn_hidden) +
                     (static_cast<int64_t>(cfg.attn_hidden) * cfg.fused_channels +
                      cfg.fused_channels);
  int64_t spatial = 3LL * 3 * cfg.high_channels * 1 + 1;
  CHECK(diff == 3 * per_task + spatial);
}

TEST_CASE("forward artifacts: heatmap sizes, attention identity, determinism") {
  ModelConfig cfg = small_config();
  std::string base = fs::temp_directory_path() / "mtnet_fwd";
  fs::remove_all(base);

  ForwardResultFiles a = run_forward(cfg, 5, 64, 128, base + "/a");
  ForwardResultFiles b = run_forward(cfg, 5, 64, 128, base + "/b");
  REQUIRE(a.pgm.size() == 4);  // h, h_det, h_seg, h_dep
  for (size_t i = 0; i < a.pgm.size(); ++i)
    CHECK(read_file(a.pgm[i]) == read_file(b.pgm[i]));
  for (size_t i = 0; i < a.tensors.size(); ++i)
    CHECK(read_file(a.tensors[i]) == read_file(b.tensors[i]));

  // PGM header pins the 1/8-scale extent.
  std::string pgm = read_file(a.pgm[0]);
  CHECK(pgm.rfind("P5\n16 8\n255\n", 0) == 0);

  // With both attention paths off, the adapted features equal h bit-exactly.
  ModelConfig ident = cfg;
  ident.use_channel_attention = false;
  ident.use_spatial_attention = false;
  ForwardResultFiles c = run_forward(ident, 5, 64, 128, base + "/c");
  std::string h_bytes = read_file(base + "/c/h.pgm");
  CHECK(read_file(base + "/c/h_det.pgm") == h_bytes);
  CHECK(read_file(base + "/c/h_seg.pgm") == h_bytes);
  CHECK(read_file(base + "/c/h_dep.pgm") == h_bytes);
  Tensor h = read_tensor(base + "/c/h.tnsr");
  Tensor h_det = read_tensor(base + "/c/h_det.tnsr");
  for (int64_t i = 0; i < h.numel(); ++i) CHECK(h[i] == h_det[i]);
  fs::remove_all(base);
}

TEST_CASE("overfit: zero steps yields only the initial loss row") {
  ModelConfig cfg = small_config();
  OverfitResult res = run_overfit(cfg, 3, 0, 1e-3, 64, 128);
  REQUIRE(res.curve.size() == 1);
  CHECK(res.curve[0].step == 0);
  CHECK(!res.diverged);
}

TEST_CASE("overfit: logged totals reflect the 1/100/1 weighting and runs are deterministic") {
  ModelConfig cfg = small_config();
  OverfitResult a = run_overfit(cfg, 3, 3, 1e-3, 64, 128);
  OverfitResult b = run_overfit(cfg, 3, 3, 1e-3, 64, 128);
  CHECK(a.csv_text == b.csv_text);
  REQUIRE(a.curve.size() == 4);
  for (const OverfitRow& r : a.curve)
    CHECK(r.total ==
          doctest::Approx(1.0 * r.det + 100.0 * r.seg + 1.0 * r.dep).epsilon(1e-12));
  // Polynomial schedule: lr decays with power 0.9 from the base.
  CHECK(a.curve[0].lr == doctest::Approx(1e-3));
  CHECK(a.curve[1].lr == doctest::Approx(1e-3 * std::pow(2.0 / 3.0, 0.9)));
}

TEST_CASE("metrics runner reproduces the embedded reference tables") {
  for (const char* fixture : {embedded_table2_json(), embedded_table3_json()}) {
    MetricsReport rep = run_metrics(metric_table_from_json_text(fixture));
    CHECK(rep.all_within_tolerance);
    for (const auto& row : rep.rows) {
      REQUIRE(row.expected.has_value());
      CHECK(std::abs(row.delta - *row.expected) <= 0.01);
    }
  }
  MetricsReport t2 = run_metrics(metric_table_from_json_text(embedded_table2_json()));
  CHECK(t2.rows.size() == 11);
}

TEST_CASE("standard gradcheck components all pass at 1e-4") {
  GradcheckReport rep = run_gradcheck_components(standard_gradcheck_components(11));
  for (const GradcheckEntry& e : rep.entries) {
    INFO(e.name, " max_rel_err ", e.max_rel_err);
    CHECK(e.pass);
  }
  CHECK(rep.all_pass);
}

TEST_CASE("a deliberately corrupted gradient is reported as a failure naming the op") {
  // Negative control: half of the forward value flows through an untracked
  // constant copy of the input, so the recorded gradient misses it.
  GradcheckComponent bad;
  bad.name = "op.corrupted_scale";
  RngStream rng(13);
  bad.probe = test::rand_tensor(rng, {6});
  bad.eps = 1e-3;
  bad.tolerance = 1e-4;
  bad.fn = [](Tape& t, Var v) {
    Var detached = t.constant(t.value(v));
    return t.add(t.scale(t.sum(v), 0.5), t.scale(t.sum(detached), 0.5));
  };
  GradcheckReport rep = run_gradcheck_components({bad});
  REQUIRE(rep.entries.size() == 1);
  CHECK(!rep.entries[0].pass);
  CHECK(!rep.all_pass);
  CHECK(rep.entries[0].name == "op.corrupted_scale");
  CHECK(rep.text.find("[FAIL] op.corrupted_scale") != std::string::npos);
}

TEST_CASE("end-to-end gradcheck at desk scale on the narrow config") {
  ModelConfig cfg = small_config();
  GradcheckReport rep = run_gradcheck_end_to_end(cfg, 2, 64, 128, 3, 1e-3, 1e-3);
  for (const GradcheckEntry& e : rep.entries) {
    INFO(e.name, " max_rel_err ", e.max_rel_err);
    CHECK(e.pass);
  }
  // Every architecture group is probed.
  auto has = [&](const std::string& n) {
    for (const auto& e : rep.entries)
      if (e.name == n) return true;
    return false;
  };
  CHECK(has("e2e.stem"));
  CHECK(has("e2e.decode"));
  CHECK(has("e2e.attn"));
  CHECK(has("e2e.head"));
  CHECK(has("e2e.fusion"));
}

TEST_CASE("synth writes the fixture set") {
  ModelConfig cfg = small_config();
  std::string dir = fs::temp_directory_path() / "mtnet_synth";
  fs::remove_all(dir);
  auto files = run_synth(cfg, 1, 64, 128, dir);
  CHECK(files.size() == 5);
  CHECK(fs::exists(dir + "/image.tnsr"));
  CHECK(fs::exists(dir + "/seg_labels.tnsr"));
  CHECK(fs::exists(dir + "/depth.tnsr"));
  CHECK(fs::exists(dir + "/det/targets.json"));
  CHECK(fs::exists(dir + "/det/heatmap.tnsr"));
  Tensor img = read_tensor(dir + "/image.tnsr");
  CHECK(img.shape() == Shape{1, 3, 64, 128});
  fs::remove_all(dir);
}

TEST_CASE("config JSON round-trip and parse diagnostics") {
  ModelConfig cfg = small_config();
  ModelConfig back = config_from_json_text(config_to_json_text(cfg));
  CHECK(back.low_channels == cfg.low_channels);
  CHECK(back.seg_classes == cfg.seg_classes);
  CHECK_THROWS_AS(config_from_json_text("{"), ConfigError);
  CHECK_THROWS_AS(config_from_json_text("{\"low_channels\": \"oops\"}"), ConfigError);
  CHECK_THROWS_AS(config_from_json_text("{\"input_h\": 63}"), ConfigError);
}

TEST_CASE("stage-table totals agree with the collected parameter count") {
  for (bool branch : {true, false}) {
    for (bool agg : {true, false}) {
      ModelConfig cfg = small_config();
      cfg.use_high_branch = branch;
      cfg.use_aggregation = agg;
      MultiTaskModel model(cfg, 0);
      CHECK(model.totals(cfg.input_h, cfg.input_w).params == model.param_count());
    }
  }
}

TEST_CASE("the five ablation variants are distinct describable configs") {
  std::vector<int64_t> params;
  auto add = [&](bool br, bool agg, bool alpha, bool beta) {
    ModelConfig cfg = small_config();
    cfg.use_high_branch = br;
    cfg.use_aggregation = agg;
    cfg.use_channel_attention = alpha;
    cfg.use_spatial_attention = beta;
    DescribeResult res = run_describe(cfg);
    CHECK(!res.rows.empty());
    params.push_back(res.totals.params);
  };
  add(false, true, true, true);
  add(true, false, true, true);
  add(true, true, false, true);
  add(true, true, true, false);
  add(true, true, true, true);
  for (size_t i = 0; i < params.size(); ++i)
    for (size_t j = i + 1; j < params.size(); ++j) CHECK(params[i] != params[j]);
}
