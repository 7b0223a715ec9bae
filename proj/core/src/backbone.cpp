#include "mtnet/backbone.hpp"

namespace mtnet {

Backbone::Backbone(const ModelConfig& cfg, RngStream& rng)
    : cfg_(cfg),
      stem1_("stem.0", cfg.in_channels, cfg.stem_channels, 3, 2, 1, 1, Act::relu, rng),
      stem2_("stem.1", cfg.stem_channels, cfg.stem_channels, 3, 2, 1, 1, Act::relu, rng),
      layer1a_("layer1.0", cfg.stem_channels, cfg.layer1_channels, 1, rng),
      layer1b_("layer1.1", cfg.layer1_channels, cfg.layer1_channels, 1, rng),
      layer2_down_("layer2.down", cfg.layer1_channels, cfg.layer2_channels, 3, 2, 1, 1, Act::relu,
                   rng),
      low3_(make_low_stage("layer3.low", cfg.layer2_channels, cfg.low_channels[0], rng)),
      low4_(make_low_stage("layer4.low", cfg.low_channels[0], cfg.low_channels[1], rng)),
      low5_(make_low_stage("layer5.low", cfg.low_channels[1], cfg.low_channels[2], rng)) {
  layer2_body_.reserve(static_cast<size_t>(cfg.stage_conv_repeats));
  for (int i = 0; i < cfg.stage_conv_repeats; ++i)
    layer2_body_.emplace_back("layer2." + std::to_string(i), cfg.layer2_channels,
                              cfg.layer2_channels, 3, 1, 1, 1, Act::relu, rng);
  if (cfg.use_high_branch) {
    high_.reserve(4);
    high_.emplace_back("layer3.high.0", cfg.layer2_channels, cfg.high_channels, 1, rng);
    high_.emplace_back("layer3.high.1", cfg.high_channels, cfg.high_channels, 1, rng);
    high_.emplace_back("layer4.high.0", cfg.high_channels, cfg.high_channels, 1, rng);
    high_.emplace_back("layer4.high.1", cfg.high_channels, cfg.high_channels, 1, rng);
  }
}

Backbone::LowStage Backbone::make_low_stage(const std::string& name, int in_ch, int out_ch,
                                            RngStream& rng) const {
  // One strided conv opens the stage; stage_conv_repeats stride-1 convs
  // follow, all conv-norm-act.
  LowStage s{ConvNormAct(name + ".down", in_ch, out_ch, 3, 2, 1, 1, Act::relu, rng), {}};
  s.body.reserve(static_cast<size_t>(cfg_.stage_conv_repeats));
  for (int i = 0; i < cfg_.stage_conv_repeats; ++i)
    s.body.emplace_back(name + "." + std::to_string(i), out_ch, out_ch, 3, 1, 1, 1, Act::relu,
                        rng);
  return s;
}

void Backbone::check_input(const Shape& in) const {
  if (in.size() != 4) throw ShapeError("backbone: expected 4-D input, got " + shape_str(in));
  if (in[1] != cfg_.in_channels)
    throw ShapeError("backbone: expected " + std::to_string(cfg_.in_channels) +
                     " input channels, got shape " + shape_str(in));
  if (in[2] < 64 || in[3] < 128)
    throw ShapeError("backbone: input " + shape_str(in) + " below the 64x128 minimum");
  if (in[2] % 64 != 0 || in[3] % 64 != 0)
    throw ShapeError("backbone: input extents must be divisible by 64, got " + shape_str(in));
}

BackboneOutputs Backbone::forward(Tape& t, Var image, bool training) {
  check_input(t.value(image).shape());
  Var x = stem1_.forward(t, image, training);
  x = stem2_.forward(t, x, training);
  x = layer1a_.forward(t, x, training);
  x = layer1b_.forward(t, x, training);
  x = layer2_down_.forward(t, x, training);
  for (auto& l : layer2_body_) x = l.forward(t, x, training);

  auto run_low = [&](LowStage& s, Var v) {
    v = s.down.forward(t, v, training);
    for (auto& l : s.body) v = l.forward(t, v, training);
    return v;
  };
  BackboneOutputs out;
  out.layer3 = run_low(low3_, x);
  out.layer4 = run_low(low4_, out.layer3);
  out.semantic = run_low(low5_, out.layer4);
  if (cfg_.use_high_branch) {
    Var h = x;
    for (auto& b : high_) h = b.forward(t, h, training);
    out.detail = h;  // layer-5 high branch is the identity
  }
  return out;
}

Shape Backbone::low_stage_out(const LowStage& s, const Shape& in) {
  Shape v = s.down.out_shape(in);
  for (const auto& l : s.body) v = l.out_shape(v);
  return v;
}

Introspection Backbone::low_stage_stats(const LowStage& s, const Shape& in) {
  Introspection acc = s.down.stats(in);
  Shape v = s.down.out_shape(in);
  for (const auto& l : s.body) {
    acc += l.stats(v);
    v = l.out_shape(v);
  }
  return acc;
}

BackboneShapes Backbone::shapes(const Shape& in) const {
  check_input(in);
  BackboneShapes s;
  s.stem = stem2_.out_shape(stem1_.out_shape(in));
  s.layer1 = layer1b_.out_shape(layer1a_.out_shape(s.stem));
  Shape v = layer2_down_.out_shape(s.layer1);
  for (const auto& l : layer2_body_) v = l.out_shape(v);
  s.layer2 = v;
  s.low3 = low_stage_out(low3_, s.layer2);
  s.low4 = low_stage_out(low4_, s.low3);
  s.low5 = low_stage_out(low5_, s.low4);
  if (cfg_.use_high_branch) {
    Shape h = s.layer2;
    for (const auto& b : high_) h = b.out_shape(h);
    s.high = h;
  }
  return s;
}

Introspection Backbone::stem_stats(const Shape& in) const {
  Introspection acc = stem1_.stats(in);
  acc += stem2_.stats(stem1_.out_shape(in));
  return acc;
}

Introspection Backbone::layer1_stats(const Shape& in) const {
  Shape stem = stem2_.out_shape(stem1_.out_shape(in));
  Introspection acc = layer1a_.stats(stem);
  acc += layer1b_.stats(layer1a_.out_shape(stem));
  return acc;
}

Introspection Backbone::layer2_stats(const Shape& in) const {
  Shape l1 = shapes(in).layer1;
  Introspection acc = layer2_down_.stats(l1);
  Shape v = layer2_down_.out_shape(l1);
  for (const auto& l : layer2_body_) {
    acc += l.stats(v);
    v = l.out_shape(v);
  }
  return acc;
}

Introspection Backbone::layer_stats(int stage, const Shape& in) const {
  BackboneShapes s = shapes(in);
  Introspection acc;
  switch (stage) {
    case 3:
      acc = low_stage_stats(low3_, s.layer2);
      break;
    case 4:
      acc = low_stage_stats(low4_, s.low3);
      break;
    case 5:
      acc = low_stage_stats(low5_, s.low4);
      break;
    default:
      throw ValueError("layer_stats: stage must be 3, 4, or 5");
  }
  if (cfg_.use_high_branch && (stage == 3 || stage == 4)) {
    size_t base = stage == 3 ? 0 : 2;
    Shape h = s.layer2;
    if (stage == 4)
      for (size_t i = 0; i < 2; ++i) h = high_[i].out_shape(h);
    for (size_t i = base; i < base + 2; ++i) {
      acc += high_[i].stats(h);
      h = high_[i].out_shape(h);
    }
  }
  return acc;
}

void Backbone::collect(std::vector<Parameter*>& out) {
  stem1_.collect(out);
  stem2_.collect(out);
  layer1a_.collect(out);
  layer1b_.collect(out);
  layer2_down_.collect(out);
  for (auto& l : layer2_body_) l.collect(out);
  auto collect_low = [&](LowStage& s) {
    s.down.collect(out);
    for (auto& l : s.body) l.collect(out);
  };
  collect_low(low3_);
  collect_low(low4_);
  collect_low(low5_);
  for (auto& b : high_) b.collect(out);
}

}  // namespace mtnet
