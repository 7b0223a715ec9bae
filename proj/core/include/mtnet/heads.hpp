#pragma once

#include <array>
#include <optional>
#include <vector>

#include "mtnet/config.hpp"
#include "mtnet/layers.hpp"

namespace mtnet {

/// Output stack per task: two conv-relu-conv blocks (3x3 then 1x1, biased,
/// no normalization), then a bilinear upscale of the final logits for the
/// dense tasks. Detection stays at map (1/8) resolution.
class TaskHead {
 public:
  TaskHead(const std::string& name, int in_ch, int out_ch, int upsample, RngStream& rng);

  Var forward(Tape& t, Var h_t);
  Shape out_shape(const Shape& in) const;
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  int upsample;
  Conv2d c1, c2, c3, c4;
};

struct LossWeights {
  double det = 1.0;
  double seg = 100.0;
  double dep = 1.0;
};

/// Dense regression targets at map (1/8) resolution. Heatmap values lie in
/// [0,1] with exact 1.0 at object cells; mask marks cells carrying
/// regression targets.
struct DetectionTargets {
  Tensor heatmap;     // (B,K,Hm,Wm)
  Tensor offset;      // (B,2,Hm,Wm)
  Tensor depth;       // (B,1,Hm,Wm)
  Tensor size3d;      // (B,3,Hm,Wm)
  Tensor yaw_bin;     // (B,1,Hm,Wm), integer-valued
  Tensor yaw_res;     // (B,1,Hm,Wm)
  Tensor pitch_roll;  // (B,2,Hm,Wm)
  Tensor mask;        // (B,1,Hm,Wm), 0/1
  int num_classes = 0;
  int num_bins = 0;
};

/// JSON descriptor + one tensor container per map.
void write_detection_targets(const std::string& dir, const DetectionTargets& t);
DetectionTargets read_detection_targets(const std::string& dir);

struct SegLossResult {
  Var loss;
  bool all_ignored = false;  // empty mean defined as 0, flagged
};
SegLossResult seg_loss(Tape& t, Var logits, const Tensor& labels, int ignore_index);

struct DepthLossResult {
  Var loss;
  bool empty_mask = false;
};
DepthLossResult depth_loss(Tape& t, Var pred, const Tensor& gt, const Tensor& valid_mask);

struct DetLossParts {
  Var total;
  Var heatmap, offset, depth, size3d, yaw_cls, yaw_res, pitch_roll;
};
/// Composite detection loss over the sub-head channel layout
/// [heatmap | offset | depth | size3d | yaw bins | yaw residuals | pitch,roll],
/// all sub-terms weighted 1.0.
DetLossParts det_loss(Tape& t, Var pred, const DetectionTargets& targets);

/// Weighted task sum. Errors (naming the task) on a non-finite component.
Var total_loss(Tape& t, Var l_det, Var l_seg, Var l_dep, const LossWeights& w);

}  // namespace mtnet
