#include "mtnet/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace mtnet {

using nlohmann::json;

int ModelConfig::head_channels(Task t) const {
  switch (t) {
    case Task::detection:
      return det_head_channels();
    case Task::segmentation:
      return seg_classes;
    case Task::depth:
      return 1;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (in_channels != 3) throw ConfigError("in_channels must be 3");
  if (input_h < 64 || input_w < 128)
    throw ConfigError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " below the 64x128 minimum");
  if (input_h % 8 != 0 || input_w % 8 != 0)
    throw ConfigError("input extents must be divisible by 8, got " + std::to_string(input_h) +
                      "x" + std::to_string(input_w));
  if (input_h % 64 != 0 || input_w % 64 != 0)
    throw ConfigError("input extents must be divisible by 64 for the aggregation scales, got " +
                      std::to_string(input_h) + "x" + std::to_string(input_w));
  if (branch_layer != 3) throw ConfigError("branch point is fixed at layer 3");
  if (low_channels.size() != 3) throw ConfigError("low_channels must list layers 3..5");
  if (fused_channels != low_channels[0])
    throw ConfigError("fused_channels must equal the layer-3 width (aggregation output)");
  for (int c : low_channels)
    if (c <= 0) throw ConfigError("channel widths must be positive");
  if (stem_channels <= 0 || layer1_channels <= 0 || layer2_channels <= 0 || high_channels <= 0 ||
      fused_channels <= 0 || attn_hidden <= 0)
    throw ConfigError("channel widths must be positive");
  if (stage_conv_repeats < 1) throw ConfigError("stage_conv_repeats must be >= 1");
  if (seg_classes < 2 || det_classes < 1 || yaw_bins < 2) throw ConfigError("invalid task sizes");
  if (lambda_det <= 0.0 || lambda_seg <= 0.0 || lambda_dep <= 0.0)
    throw ConfigError("loss weights must be strictly positive");
  if (attn_dilation < 1) throw ConfigError("attn_dilation must be >= 1");
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  }
}

}  // namespace

ModelConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ModelConfig c;
  read_field(j, "in_channels", c.in_channels);
  read_field(j, "input_h", c.input_h);
  read_field(j, "input_w", c.input_w);
  read_field(j, "stem_channels", c.stem_channels);
  read_field(j, "layer1_channels", c.layer1_channels);
  read_field(j, "layer2_channels", c.layer2_channels);
  read_field(j, "low_channels", c.low_channels);
  read_field(j, "stage_conv_repeats", c.stage_conv_repeats);
  read_field(j, "high_channels", c.high_channels);
  read_field(j, "branch_layer", c.branch_layer);
  read_field(j, "fused_channels", c.fused_channels);
  read_field(j, "use_high_branch", c.use_high_branch);
  read_field(j, "use_aggregation", c.use_aggregation);
  read_field(j, "use_channel_attention", c.use_channel_attention);
  read_field(j, "use_spatial_attention", c.use_spatial_attention);
  read_field(j, "attn_hidden", c.attn_hidden);
  read_field(j, "attn_dilation", c.attn_dilation);
  read_field(j, "beta_per_channel", c.beta_per_channel);
  read_field(j, "seg_classes", c.seg_classes);
  read_field(j, "det_classes", c.det_classes);
  read_field(j, "yaw_bins", c.yaw_bins);
  read_field(j, "lambda_det", c.lambda_det);
  read_field(j, "lambda_seg", c.lambda_seg);
  read_field(j, "lambda_dep", c.lambda_dep);
  c.validate();
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json_text(ss.str());
}

std::string config_to_json_text(const ModelConfig& c) {
  json j;
  j["in_channels"] = c.in_channels;
  j["input_h"] = c.input_h;
  j["input_w"] = c.input_w;
  j["stem_channels"] = c.stem_channels;
  j["layer1_channels"] = c.layer1_channels;
  j["layer2_channels"] = c.layer2_channels;
  j["low_channels"] = c.low_channels;
  j["stage_conv_repeats"] = c.stage_conv_repeats;
  j["high_channels"] = c.high_channels;
  j["branch_layer"] = c.branch_layer;
  j["fused_channels"] = c.fused_channels;
  j["use_high_branch"] = c.use_high_branch;
  j["use_aggregation"] = c.use_aggregation;
  j["use_channel_attention"] = c.use_channel_attention;
  j["use_spatial_attention"] = c.use_spatial_attention;
  j["attn_hidden"] = c.attn_hidden;
  j["attn_dilation"] = c.attn_dilation;
  j["beta_per_channel"] = c.beta_per_channel;
  j["seg_classes"] = c.seg_classes;
  j["det_classes"] = c.det_classes;
  j["yaw_bins"] = c.yaw_bins;
  j["lambda_det"] = c.lambda_det;
  j["lambda_seg"] = c.lambda_seg;
  j["lambda_dep"] = c.lambda_dep;
  return j.dump(2) + "\n";
}

void save_config(const std::string& path, const ModelConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << config_to_json_text(cfg);
}

}  // namespace mtnet
