#pragma once

#include <array>
#include <optional>
#include <vector>

#include "mtnet/config.hpp"
#include "mtnet/layers.hpp"

namespace mtnet {

/// Per-task channel gate: global average pool over the deepest semantic
/// feature, two fully connected layers with a ReLU between, sigmoid output
/// of shape (B, fused, 1, 1) strictly inside (0,1).
class ChannelAttentionHead {
 public:
  ChannelAttentionHead(const std::string& name, int in_ch, int hidden, int out_ch,
                       RngStream& rng);

  Var forward(Tape& t, Var semantic);
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  int in_ch, out_ch;
  Linear fc1, fc2;
};

/// Task-generic spatial gate: one dilated 3x3 convolution (extent-preserving
/// padding) plus sigmoid; (B, 1, H, W), shared by all tasks.
class SpatialAttentionHead {
 public:
  SpatialAttentionHead(const std::string& name, int in_ch, int out_ch, int dilation,
                       RngStream& rng);

  Var forward(Tape& t, Var detail);
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  Conv2d conv;
};

/// h_t = alpha * h (per channel) + beta (broadcast over channels). Absent
/// maps reduce to the corresponding identity, bit-exactly.
Var task_adapt(Tape& t, Var h, std::optional<Var> alpha, std::optional<Var> beta);

struct AttentionMaps {
  std::array<std::optional<Var>, kNumTasks> alpha;
  std::optional<Var> beta;
};

/// Attention generator over the shared feature: channel gates are
/// task-specific and read the semantic output; the spatial gate is shared
/// and reads the detail output (or the fused feature when the high branch
/// is off).
class TaskAttentionGenerator {
 public:
  TaskAttentionGenerator(const ModelConfig& cfg, int spatial_src_ch, RngStream& rng);

  /// Produces whichever maps the config enables.
  AttentionMaps forward(Tape& t, Var semantic, Var spatial_src);
  Var channel_attention(Tape& t, Var semantic, int task);
  std::array<Var, kNumTasks> adapt_all(Tape& t, Var h, const AttentionMaps& maps);

  Introspection stats(const Shape& semantic, const Shape& spatial_src) const;
  void collect(std::vector<Parameter*>& out);

  bool has_channel() const { return !channel_heads_.empty(); }
  bool has_spatial() const { return spatial_.has_value(); }

 private:
  std::vector<ChannelAttentionHead> channel_heads_;  // one per task
  std::optional<SpatialAttentionHead> spatial_;
};

}  // namespace mtnet
