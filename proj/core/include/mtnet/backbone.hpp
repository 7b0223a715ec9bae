#pragma once

#include <optional>
#include <vector>

#include "mtnet/config.hpp"
#include "mtnet/layers.hpp"

namespace mtnet {

struct BackboneOutputs {
  Var layer3;                // low branch, 1/16 resolution
  Var layer4;                // low branch, 1/32
  Var semantic;              // low branch layer 5, 1/64
  std::optional<Var> detail; // high branch, 1/8 (absent with use_high_branch off)
};

struct BackboneShapes {
  Shape stem, layer1, layer2;
  Shape low3, low4, low5;
  std::optional<Shape> high;  // constant across layers 3..5
};

/// Two-pathway trunk: shared stem and layers 1-2, then a strided
/// low-resolution branch (layers 3-5) alongside a stride-free
/// high-resolution branch at 1/8 scale. High-branch layer 5 is the identity.
class Backbone {
 public:
  Backbone(const ModelConfig& cfg, RngStream& rng);

  BackboneOutputs forward(Tape& t, Var image, bool training);

  /// Symbolic shape propagation; no activations are allocated.
  BackboneShapes shapes(const Shape& in) const;

  Introspection stem_stats(const Shape& in) const;
  Introspection layer1_stats(const Shape& in) const;
  Introspection layer2_stats(const Shape& in) const;
  /// stage in {3,4,5}; includes both branches where present.
  Introspection layer_stats(int stage, const Shape& in) const;

  void collect(std::vector<Parameter*>& out);

 private:
  struct LowStage {
    ConvNormAct down;
    std::vector<ConvNormAct> body;
  };

  void check_input(const Shape& in) const;
  LowStage make_low_stage(const std::string& name, int in_ch, int out_ch, RngStream& rng) const;
  static Shape low_stage_out(const LowStage& s, const Shape& in);
  static Introspection low_stage_stats(const LowStage& s, const Shape& in);

  ModelConfig cfg_;
  ConvNormAct stem1_, stem2_;
  ResidualBasicBlock layer1a_, layer1b_;
  ConvNormAct layer2_down_;
  std::vector<ConvNormAct> layer2_body_;
  LowStage low3_, low4_, low5_;
  std::vector<ResidualBasicBlock> high_;  // two blocks each for layers 3 and 4
};

}  // namespace mtnet
