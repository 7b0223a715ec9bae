#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mtnet/tensor.hpp"

namespace mtnet {

enum class Task : int { detection = 0, segmentation = 1, depth = 2 };
inline constexpr std::array<const char*, 3> kTaskNames = {"det", "seg", "dep"};
inline constexpr int kNumTasks = 3;

/// Declarative description of the trunk, attention generator, and heads,
/// plus the ablation toggles. Serialized as JSON (see data/config).
struct ModelConfig {
  int in_channels = 3;
  int input_h = 1024;
  int input_w = 2048;

  int stem_channels = 64;
  int layer1_channels = 64;
  int layer2_channels = 128;
  std::vector<int> low_channels = {256, 512, 1024};  // layers 3..5, semantic branch
  int stage_conv_repeats = 3;  // stride-1 conv-norm-act repeats per strided stage
  int high_channels = 128;                           // detail branch, stride-free
  int branch_layer = 3;                              // split at the 1/8-resolution stage
  int fused_channels = 256;

  bool use_high_branch = true;
  bool use_aggregation = true;
  bool use_channel_attention = true;
  bool use_spatial_attention = true;

  int attn_hidden = 256;
  int attn_dilation = 2;
  bool beta_per_channel = false;  // alternative reading; default single channel

  int seg_classes = 19;
  int det_classes = 8;
  int yaw_bins = 12;
  double lambda_det = 1.0;
  double lambda_seg = 100.0;
  double lambda_dep = 1.0;

  /// Detection head channel budget: class heatmap + center offset (2) +
  /// depth (1) + 3-D size (3) + yaw bins (cls + residual) + pitch/roll (2).
  int det_head_channels() const { return det_classes + 2 + 1 + 3 + 2 * yaw_bins + 2; }
  int head_channels(Task t) const;

  /// Full pipeline needs 64-divisible extents (three exact halvings past
  /// the 1/8 stage) and at least 64x128 input.
  void validate() const;
};

ModelConfig config_from_json_text(const std::string& text);
ModelConfig load_config(const std::string& path);
std::string config_to_json_text(const ModelConfig& cfg);
void save_config(const std::string& path, const ModelConfig& cfg);

}  // namespace mtnet
