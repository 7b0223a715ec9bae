#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtnet/aggregation.hpp"
#include "mtnet/attention.hpp"
#include "mtnet/backbone.hpp"
#include "mtnet/heads.hpp"

namespace mtnet {

inline constexpr int kSegIgnoreIndex = 255;

struct ForwardMaps {
  Var layer3, layer4, semantic;
  std::optional<Var> detail;
  Var aggregated;  // 1/16 resolution, fused width
  Var fused;       // h, 1/8 resolution
  AttentionMaps attention;
  std::array<Var, kNumTasks> adapted;  // h_t
  std::array<Var, kNumTasks> pred;     // per-task logits/regression maps
};

struct TrainingTargets {
  Tensor seg_labels;  // (B,1,H,W), values in [0,classes) or the ignore index
  Tensor depth;       // (B,1,H,W)
  Tensor depth_mask;  // (B,1,H,W), 0/1
  DetectionTargets det;
};

struct ModelLosses {
  Var total;
  Var det, seg, dep;
  DetLossParts det_parts;
  bool seg_all_ignored = false;
  bool dep_empty_mask = false;
};

struct StageRow {
  std::string name;
  std::string output;  // "H × W" or "H × W, H × W" for branched stages
  int64_t params = 0;
  int64_t macs = 0;
};

/// Full network: two-pathway trunk, aggregation (or its substitute),
/// fusion, attention generator, and the three task heads. Construction is
/// fully determined by (config, seed).
class MultiTaskModel {
 public:
  MultiTaskModel(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  ForwardMaps forward(Tape& t, Var image, bool training, AggregationTrace* trace = nullptr);
  ModelLosses loss(Tape& t, const ForwardMaps& maps, const TrainingTargets& targets);

  std::vector<Parameter*> parameters();
  int64_t param_count();
  void zero_grads();

  /// Table-style stage report from symbolic shape propagation.
  std::vector<StageRow> stage_table(int64_t input_h, int64_t input_w) const;
  Introspection totals(int64_t input_h, int64_t input_w) const;

  Backbone& backbone() { return backbone_; }
  TaskAttentionGenerator& attention() { return attention_; }
  Aggregator* aggregator() { return aggregator_ ? &*aggregator_ : nullptr; }
  TaskHead& head(Task task) { return heads_[static_cast<size_t>(task)]; }

 private:
  MultiTaskModel(const ModelConfig& cfg, RngStream rng, int);

  ModelConfig cfg_;
  Backbone backbone_;
  std::optional<Aggregator> aggregator_;
  std::optional<ContextSubstitute> context_;
  FusionModule fusion_;
  TaskAttentionGenerator attention_;
  std::vector<TaskHead> heads_;
};

std::string format_hw(const Shape& s);

}  // namespace mtnet
