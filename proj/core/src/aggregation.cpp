#include "mtnet/aggregation.hpp"

namespace mtnet {

// ---------------------------------------------------------------- step

AggregationStep::AggregationStep(const std::string& name, int coarse_ch, int fine_ch,
                                 RngStream& rng)
    : pre(name + ".pre", coarse_ch, fine_ch, 3, 1, 1, 1, Act::relu, rng),
      post(name + ".post", 2 * fine_ch, fine_ch, 3, 1, 1, 1, Act::relu, rng) {}

Var AggregationStep::forward(Tape& t, Var coarse, Var fine, bool training) {
  const Shape& cs = t.value(coarse).shape();
  const Shape& fs = t.value(fine).shape();
  if (cs.size() != 4 || fs.size() != 4 || cs[2] * 2 != fs[2] || cs[3] * 2 != fs[3])
    throw ShapeError("aggregation step: coarse " + shape_str(cs) +
                     " is not exactly half of fine " + shape_str(fs));
  Var up = t.bilinear_resize(pre.forward(t, coarse, training), 2);
  return post.forward(t, t.concat_channels(up, fine), training);
}

Shape AggregationStep::out_shape(const Shape& coarse, const Shape& fine) const {
  Shape up = pre.out_shape(coarse);
  up[2] *= 2;
  up[3] *= 2;
  Shape cat = {fine[0], up[1] + fine[1], fine[2], fine[3]};
  return post.out_shape(cat);
}

Introspection AggregationStep::stats(const Shape& coarse, const Shape& fine) const {
  Introspection s = pre.stats(coarse);
  Shape up = pre.out_shape(coarse);
  up[2] *= 2;
  up[3] *= 2;
  s.macs += resize_macs(up);
  Shape cat = {fine[0], up[1] + fine[1], fine[2], fine[3]};
  s += post.stats(cat);
  return s;
}

void AggregationStep::collect(std::vector<Parameter*>& out) {
  pre.collect(out);
  post.collect(out);
}

// ---------------------------------------------------------------- aggregator

Aggregator::Aggregator(const std::vector<int>& channels, RngStream& rng) : channels_(channels) {
  const int n = static_cast<int>(channels.size());
  if (n < 2) throw ConfigError("aggregation needs at least two scales, got " + std::to_string(n));
  // Walk the merge schedule once to derive each step's channel widths; the
  // slot widths evolve as coarse slots take on finer results.
  std::vector<int> ch = channels;
  for (int idx1 = 1; idx1 != n; ++idx1) {
    for (int idx2 = idx1; idx2 != 0; --idx2) {
      int coarse = ch[static_cast<size_t>(idx2 - 1)];
      int fine = ch[static_cast<size_t>(idx2)];
      std::string name =
          "decode.f" + std::to_string(idx1) + "_" + std::to_string(idx2);
      labels_.emplace_back(idx1, idx2);
      steps_.emplace_back(name, coarse, fine, rng);
      ch[static_cast<size_t>(idx2 - 1)] = fine;
    }
  }
}

void Aggregator::validate_scales(const std::vector<Shape>& scales) const {
  if (scales.size() != channels_.size())
    throw ShapeError("aggregate: expected " + std::to_string(channels_.size()) +
                     " scales, got " + std::to_string(scales.size()));
  for (size_t i = 0; i < scales.size(); ++i) {
    if (scales[i].size() != 4)
      throw ShapeError("aggregate: scale " + std::to_string(i) + " is not 4-D");
    if (scales[i][1] != channels_[i])
      throw ShapeError("aggregate: scale " + std::to_string(i) + " has " +
                       std::to_string(scales[i][1]) + " channels, expected " +
                       std::to_string(channels_[i]));
    if (i > 0 && (scales[i][2] != 2 * scales[i - 1][2] || scales[i][3] != 2 * scales[i - 1][3]))
      throw ShapeError("aggregate: adjacent scales " + shape_str(scales[i - 1]) + " and " +
                       shape_str(scales[i]) + " are not 2x apart");
  }
}

Var Aggregator::forward(Tape& t, std::vector<Var> scales, bool training,
                        AggregationTrace* trace) {
  std::vector<Shape> shapes;
  shapes.reserve(scales.size());
  for (Var v : scales) shapes.push_back(t.value(v).shape());
  validate_scales(shapes);

  const int n = static_cast<int>(scales.size());
  size_t step = 0;
  for (int idx1 = 1; idx1 != n; ++idx1) {
    for (int idx2 = idx1; idx2 != 0; --idx2, ++step) {
      Var coarse = scales[static_cast<size_t>(idx2 - 1)];
      Var fine = scales[static_cast<size_t>(idx2)];
      Var merged = steps_[step].forward(t, coarse, fine, training);
      if (trace) {
        trace->apps.push_back({idx1, idx2, t.value(coarse).shape(), t.value(fine).shape(),
                               t.value(merged).shape()});
      }
      scales[static_cast<size_t>(idx2 - 1)] = merged;
    }
  }
  return scales[0];
}

Shape Aggregator::out_shape(const std::vector<Shape>& scales) const {
  validate_scales(scales);
  std::vector<Shape> slots = scales;
  const int n = static_cast<int>(slots.size());
  size_t step = 0;
  for (int idx1 = 1; idx1 != n; ++idx1) {
    for (int idx2 = idx1; idx2 != 0; --idx2, ++step) {
      slots[static_cast<size_t>(idx2 - 1)] =
          steps_[step].out_shape(slots[static_cast<size_t>(idx2 - 1)],
                                 slots[static_cast<size_t>(idx2)]);
    }
  }
  return slots[0];
}

Introspection Aggregator::stats(const std::vector<Shape>& scales) const {
  validate_scales(scales);
  std::vector<Shape> slots = scales;
  Introspection acc;
  const int n = static_cast<int>(slots.size());
  size_t step = 0;
  for (int idx1 = 1; idx1 != n; ++idx1) {
    for (int idx2 = idx1; idx2 != 0; --idx2, ++step) {
      acc += steps_[step].stats(slots[static_cast<size_t>(idx2 - 1)],
                                slots[static_cast<size_t>(idx2)]);
      slots[static_cast<size_t>(idx2 - 1)] =
          steps_[step].out_shape(slots[static_cast<size_t>(idx2 - 1)],
                                 slots[static_cast<size_t>(idx2)]);
    }
  }
  return acc;
}

std::vector<Shape> Aggregator::stage_shapes(const std::vector<Shape>& scales) const {
  validate_scales(scales);
  std::vector<Shape> slots = scales;
  std::vector<Shape> out;
  const int n = static_cast<int>(slots.size());
  size_t step = 0;
  for (int idx1 = 1; idx1 != n; ++idx1) {
    for (int idx2 = idx1; idx2 != 0; --idx2, ++step) {
      slots[static_cast<size_t>(idx2 - 1)] =
          steps_[step].out_shape(slots[static_cast<size_t>(idx2 - 1)],
                                 slots[static_cast<size_t>(idx2)]);
    }
    out.push_back(slots[0]);
  }
  return out;
}

std::vector<Introspection> Aggregator::stage_stats(const std::vector<Shape>& scales) const {
  validate_scales(scales);
  std::vector<Shape> slots = scales;
  std::vector<Introspection> out;
  const int n = static_cast<int>(slots.size());
  size_t step = 0;
  for (int idx1 = 1; idx1 != n; ++idx1) {
    Introspection acc;
    for (int idx2 = idx1; idx2 != 0; --idx2, ++step) {
      acc += steps_[step].stats(slots[static_cast<size_t>(idx2 - 1)],
                                slots[static_cast<size_t>(idx2)]);
      slots[static_cast<size_t>(idx2 - 1)] =
          steps_[step].out_shape(slots[static_cast<size_t>(idx2 - 1)],
                                 slots[static_cast<size_t>(idx2)]);
    }
    out.push_back(acc);
  }
  return out;
}

void Aggregator::collect(std::vector<Parameter*>& out) {
  for (auto& s : steps_) s.collect(out);
}

// ---------------------------------------------------------------- context substitute

ContextSubstitute::ContextSubstitute(int in_ch, int out_ch, RngStream& rng)
    : proj("context.proj", in_ch, out_ch, 1, 1, 1, 0, Act::relu, rng) {}

Var ContextSubstitute::forward(Tape& t, Var semantic, bool training) {
  return proj.forward(t, t.bilinear_resize(semantic, 4), training);
}

Shape ContextSubstitute::out_shape(const Shape& in) const {
  Shape up = in;
  up[2] *= 4;
  up[3] *= 4;
  return proj.out_shape(up);
}

Introspection ContextSubstitute::stats(const Shape& in) const {
  Shape up = in;
  up[2] *= 4;
  up[3] *= 4;
  Introspection s = proj.stats(up);
  s.macs += resize_macs(up);
  return s;
}

void ContextSubstitute::collect(std::vector<Parameter*>& out) { proj.collect(out); }

// ---------------------------------------------------------------- fusion

FusionModule::FusionModule(int agg_ch, int detail_ch, bool use_detail, RngStream& rng) {
  if (use_detail)
    proj.emplace("fusion.proj", detail_ch, agg_ch, 1, 1, 1, 0, /*with_bias=*/false, rng);
}

Var FusionModule::forward(Tape& t, Var x_agg, std::optional<Var> x_detail, bool training) {
  (void)training;
  Var up = t.bilinear_resize(x_agg, 2);
  if (!proj) {
    if (x_detail) throw ValueError("fusion: detail input given but no projection configured");
    return up;
  }
  if (!x_detail) throw ValueError("fusion: projection configured but detail input missing");
  Var g = proj->forward(t, *x_detail);
  const Shape& us = t.value(up).shape();
  const Shape& gs = t.value(g).shape();
  if (us != gs)
    throw ShapeError("fusion: upsampled " + shape_str(us) + " vs projected detail " +
                     shape_str(gs));
  return t.add(up, g);
}

Shape FusionModule::out_shape(const Shape& agg) const {
  Shape up = agg;
  up[2] *= 2;
  up[3] *= 2;
  return up;
}

Introspection FusionModule::stats(const Shape& agg, const std::optional<Shape>& detail) const {
  Introspection s;
  s.macs += resize_macs(out_shape(agg));
  if (proj && detail) s += proj->stats(*detail);
  return s;
}

void FusionModule::collect(std::vector<Parameter*>& out) {
  if (proj) proj->collect(out);
}

}  // namespace mtnet
