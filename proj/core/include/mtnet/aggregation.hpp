#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "mtnet/layers.hpp"

namespace mtnet {

/// One application per visited (idx1, idx2) pair, in execution order.
struct AggregationTrace {
  struct App {
    int idx1 = 0;  // 1-based stage index
    int idx2 = 0;  // 1-based scale index
    Shape coarse_in, fine_in, out;
  };
  std::vector<App> apps;
};

/// Merge step between adjacent scales: project the coarse feature to the
/// fine width, upsample 2x, concatenate onto the fine feature, project back
/// to the fine width. Output has the fine feature's shape.
class AggregationStep {
 public:
  AggregationStep(const std::string& name, int coarse_ch, int fine_ch, RngStream& rng);

  Var forward(Tape& t, Var coarse, Var fine, bool training);
  Shape out_shape(const Shape& coarse, const Shape& fine) const;
  Introspection stats(const Shape& coarse, const Shape& fine) const;
  void collect(std::vector<Parameter*>& out);

  ConvNormAct pre;   // coarse channels -> fine channels, 3x3
  ConvNormAct post;  // 2x fine channels -> fine channels, 3x3
};

/// Hierarchical aggregation over an ordered scale list (coarsest first,
/// adjacent entries exactly 2x apart in extent and channels). The nested
/// scan merges stage by stage and returns the finest slot; each visited
/// (idx1, idx2) pair owns its own weights.
class Aggregator {
 public:
  /// channels: per-scale widths, coarsest first; at least two scales.
  Aggregator(const std::vector<int>& channels, RngStream& rng);

  Var forward(Tape& t, std::vector<Var> scales, bool training,
              AggregationTrace* trace = nullptr);
  Shape out_shape(const std::vector<Shape>& scales) const;
  Introspection stats(const std::vector<Shape>& scales) const;
  /// Finest-slot shape and cost per merge stage (grouped by idx1).
  std::vector<Shape> stage_shapes(const std::vector<Shape>& scales) const;
  std::vector<Introspection> stage_stats(const std::vector<Shape>& scales) const;
  void collect(std::vector<Parameter*>& out);

  int num_scales() const { return static_cast<int>(channels_.size()); }
  const std::vector<std::pair<int, int>>& step_labels() const { return labels_; }

 private:
  void validate_scales(const std::vector<Shape>& scales) const;

  std::vector<int> channels_;
  std::vector<std::pair<int, int>> labels_;
  std::vector<AggregationStep> steps_;
};

/// Stand-in for the aggregation path when it is toggled off: upsample the
/// deepest feature 4x and project it to the fused width with a 1x1
/// conv-norm-act.
class ContextSubstitute {
 public:
  ContextSubstitute(int in_ch, int out_ch, RngStream& rng);

  Var forward(Tape& t, Var semantic, bool training);
  Shape out_shape(const Shape& in) const;
  Introspection stats(const Shape& in) const;
  void collect(std::vector<Parameter*>& out);

  ConvNormAct proj;
};

/// h = upsample2x(x_agg) + g(x_detail); g is a bias-free 1x1 projection to
/// the aggregated width. Without the detail branch, h = upsample2x(x_agg).
class FusionModule {
 public:
  FusionModule(int agg_ch, int detail_ch, bool use_detail, RngStream& rng);

  Var forward(Tape& t, Var x_agg, std::optional<Var> x_detail, bool training);
  Shape out_shape(const Shape& agg) const;
  Introspection stats(const Shape& agg, const std::optional<Shape>& detail) const;
  void collect(std::vector<Parameter*>& out);

  std::optional<Conv2d> proj;
};

}  // namespace mtnet
