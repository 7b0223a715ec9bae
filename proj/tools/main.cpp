// mtnet CLI: inspect, exercise, and verify the multi-task network at desk
// scale. See README for the subcommand reference.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mtnet/harness.hpp"
#include "mtnet/io.hpp"

namespace fs = std::filesystem;
using namespace mtnet;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string input = "64x128";
  uint64_t seed = 0;
  std::string out_dir = "out";
  bool no_branch = false, no_agg = false, no_alpha = false, no_beta = false, no_tag = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, const char* default_input) {
  a.input = default_input;
  cmd->add_option("--config", a.config_path, "model config JSON (defaults to the built-in)");
  cmd->add_option("--input", a.input, "input size HxW")->capture_default_str();
  cmd->add_option("--seed", a.seed, "seed for weights and synthetic data")
      ->capture_default_str();
  cmd->add_option("--out", a.out_dir, "output directory")->capture_default_str();
  cmd->add_flag("--no-branch", a.no_branch, "disable the high-resolution branch");
  cmd->add_flag("--no-agg", a.no_agg, "replace aggregation with the context substitute");
  cmd->add_flag("--no-alpha", a.no_alpha, "disable task channel attention");
  cmd->add_flag("--no-beta", a.no_beta, "disable spatial attention");
  cmd->add_flag("--no-tag", a.no_tag, "disable the attention generator (both gates)");
}

std::pair<int64_t, int64_t> parse_input(const std::string& s) {
  size_t pos = s.find('x');
  if (pos == std::string::npos) throw ConfigError("--input expects HxW, got '" + s + "'");
  try {
    return {std::stoll(s.substr(0, pos)), std::stoll(s.substr(pos + 1))};
  } catch (const std::exception&) {
    throw ConfigError("--input expects HxW, got '" + s + "'");
  }
}

ModelConfig make_config(const CommonArgs& a, bool apply_input) {
  ModelConfig cfg = a.config_path.empty() ? config_from_json_text(embedded_default_config_json())
                                          : load_config(a.config_path);
  if (a.no_branch) cfg.use_high_branch = false;
  if (a.no_agg) cfg.use_aggregation = false;
  if (a.no_alpha || a.no_tag) cfg.use_channel_attention = false;
  if (a.no_beta || a.no_tag) cfg.use_spatial_attention = false;
  if (apply_input) {
    auto [h, w] = parse_input(a.input);
    cfg.input_h = static_cast<int>(h);
    cfg.input_w = static_cast<int>(w);
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task two-pathway network harness"};
  app.require_subcommand(1);

  CommonArgs describe_args, forward_args, gradcheck_args, overfit_args, synth_args;
  CommonArgs metrics_args;
  bool describe_apply_input = false;
  std::string forward_input_file;
  bool gradcheck_per_layer = false;
  int64_t overfit_steps = 200;
  double overfit_lr = 1e-3;
  double overfit_power = 0.9;
  std::string metrics_table_path;
  bool metrics_golden = false;

  CLI::App* describe = app.add_subcommand("describe", "stage/shape/params/MACs report");
  add_common(describe, describe_args, "1024x2048");
  describe->get_option("--input")->each([&](const std::string&) { describe_apply_input = true; });

  CLI::App* forward = app.add_subcommand("forward", "run inference, dump features and heatmaps");
  add_common(forward, forward_args, "64x128");
  forward->add_option("--input-file", forward_input_file, "tensor container to use as input");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck, gradcheck_args, "64x128");
  gradcheck->add_flag("--per-layer", gradcheck_per_layer, "skip the end-to-end pass");

  CLI::App* overfit = app.add_subcommand("overfit", "overfit a seeded synthetic batch");
  add_common(overfit, overfit_args, "64x128");
  overfit->add_option("--steps", overfit_steps, "optimizer steps")->capture_default_str();
  overfit->add_option("--lr", overfit_lr, "base learning rate")->capture_default_str();
  overfit->add_option("--power", overfit_power, "polynomial decay power")->capture_default_str();

  CLI::App* metrics = app.add_subcommand("metrics", "averaged relative performance report");
  metrics->add_option("table", metrics_table_path, "metric table JSON");
  metrics->add_option("--out", metrics_args.out_dir, "output directory");
  metrics->add_flag("--golden", metrics_golden, "verify the embedded reference tables");

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic sample to disk");
  add_common(synth, synth_args, "64x128");

  CLI11_PARSE(app, argc, argv);

  try {
    if (describe->parsed()) {
      ModelConfig cfg = make_config(describe_args, describe_apply_input);
      DescribeResult res = run_describe(cfg);
      std::cout << res.text;
      if (describe->count("--out") > 0) {
        fs::create_directories(describe_args.out_dir);
        write_file(describe_args.out_dir + "/describe.txt", res.text);
        write_file(describe_args.out_dir + "/describe.json", res.json_text);
      }
      if (res.reference_applicable && !res.matches_reference) {
        std::cerr << "stage outputs deviate from the reference layout\n";
        return 1;
      }
      return 0;
    }

    if (forward->parsed()) {
      ModelConfig cfg = make_config(forward_args, true);
      ForwardResultFiles files = run_forward(cfg, forward_args.seed, cfg.input_h, cfg.input_w,
                                             forward_args.out_dir, forward_input_file);
      for (const auto& f : files.pgm) std::cout << f << "\n";
      for (const auto& f : files.tensors) std::cout << f << "\n";
      return 0;
    }

    if (gradcheck->parsed()) {
      ModelConfig cfg = make_config(gradcheck_args, true);
      GradcheckReport rep = run_gradcheck(cfg, gradcheck_args.seed, gradcheck_per_layer);
      std::cout << rep.text;
      std::cout << (rep.all_pass ? "gradcheck: all components pass\n"
                                 : "gradcheck: FAILURES present\n");
      return rep.all_pass ? 0 : 1;
    }

    if (overfit->parsed()) {
      ModelConfig cfg = make_config(overfit_args, true);
      OverfitResult res = run_overfit(cfg, overfit_args.seed, overfit_steps, overfit_lr,
                                      cfg.input_h, cfg.input_w, overfit_power);
      fs::create_directories(overfit_args.out_dir);
      write_file(overfit_args.out_dir + "/loss.csv", res.csv_text);
      if (res.diverged) {
        std::cerr << "overfit diverged (non-finite loss) at step " << res.diverged_step << "\n";
        return 2;
      }
      std::cout << "initial loss " << res.curve.front().total << ", final loss "
                << res.curve.back().total << " (" << overfit_steps << " steps)\n";
      std::cout << overfit_args.out_dir << "/loss.csv\n";
      return 0;
    }

    if (metrics->parsed()) {
      int rc = 0;
      if (!metrics_table_path.empty()) {
        MetricsReport rep = run_metrics(load_metric_table(metrics_table_path));
        std::cout << rep.text;
        if (metrics->count("--out") > 0) {
          fs::create_directories(metrics_args.out_dir);
          write_file(metrics_args.out_dir + "/metrics.json", rep.json_text);
        }
        if (metrics_golden && !rep.all_within_tolerance) rc = 1;
      }
      if (metrics_golden) {
        for (const char* fixture : {embedded_table2_json(), embedded_table3_json()}) {
          MetricsReport rep = run_metrics(metric_table_from_json_text(fixture));
          std::cout << rep.text;
          if (!rep.all_within_tolerance) rc = 1;
        }
        std::cout << (rc == 0 ? "metrics: all reference deltas reproduced\n"
                              : "metrics: reference MISMATCH\n");
      }
      if (metrics_table_path.empty() && !metrics_golden) {
        std::cerr << "metrics: provide a table JSON or --golden\n";
        return 1;
      }
      return rc;
    }

    if (synth->parsed()) {
      ModelConfig cfg = make_config(synth_args, true);
      auto files = run_synth(cfg, synth_args.seed, cfg.input_h, cfg.input_w, synth_args.out_dir);
      for (const auto& f : files) std::cout << f << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
