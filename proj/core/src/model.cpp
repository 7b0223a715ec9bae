#include "mtnet/model.hpp"

namespace mtnet {

namespace {

std::vector<int> scale_channels(const ModelConfig& cfg) {
  // Coarsest first: layer5, layer4, layer3.
  return {cfg.low_channels[2], cfg.low_channels[1], cfg.low_channels[0]};
}

std::optional<Aggregator> make_aggregator(const ModelConfig& cfg, RngStream& rng) {
  if (!cfg.use_aggregation) return std::nullopt;
  return std::optional<Aggregator>(std::in_place, scale_channels(cfg), rng);
}

std::optional<ContextSubstitute> make_context(const ModelConfig& cfg, RngStream& rng) {
  if (cfg.use_aggregation) return std::nullopt;
  return std::optional<ContextSubstitute>(std::in_place, cfg.low_channels[2], cfg.fused_channels,
                                          rng);
}

}  // namespace

std::string format_hw(const Shape& s) {
  return std::to_string(s[2]) + " × " + std::to_string(s[3]);
}

MultiTaskModel::MultiTaskModel(const ModelConfig& cfg, uint64_t seed)
    : MultiTaskModel(cfg, RngStream(seed), 0) {}

// Private-ish delegation target: one stream drives every draw in a fixed
// construction order, so (config, seed) pins all initial weights.
MultiTaskModel::MultiTaskModel(const ModelConfig& cfg, RngStream rng, int)
    : cfg_((cfg.validate(), cfg)),
      backbone_(cfg_, rng),
      aggregator_(make_aggregator(cfg_, rng)),
      context_(make_context(cfg_, rng)),
      fusion_(cfg_.fused_channels, cfg_.high_channels, cfg_.use_high_branch, rng),
      attention_(cfg_, cfg_.use_high_branch ? cfg_.high_channels : cfg_.fused_channels, rng) {
  heads_.reserve(kNumTasks);
  for (int task = 0; task < kNumTasks; ++task) {
    Task t = static_cast<Task>(task);
    int upsample = (t == Task::detection) ? 1 : 8;
    heads_.emplace_back(std::string("head.") + kTaskNames[static_cast<size_t>(task)],
                        cfg_.fused_channels, cfg_.head_channels(t), upsample, rng);
  }
}

ForwardMaps MultiTaskModel::forward(Tape& t, Var image, bool training, AggregationTrace* trace) {
  ForwardMaps maps;
  BackboneOutputs bb = backbone_.forward(t, image, training);
  maps.layer3 = bb.layer3;
  maps.layer4 = bb.layer4;
  maps.semantic = bb.semantic;
  maps.detail = bb.detail;

  if (aggregator_) {
    maps.aggregated = aggregator_->forward(t, {bb.semantic, bb.layer4, bb.layer3}, training,
                                           trace);
  } else {
    maps.aggregated = context_->forward(t, bb.semantic, training);
  }
  maps.fused = fusion_.forward(t, maps.aggregated, maps.detail, training);

  Var spatial_src = maps.detail ? *maps.detail : maps.fused;
  maps.attention = attention_.forward(t, maps.semantic, spatial_src);
  maps.adapted = attention_.adapt_all(t, maps.fused, maps.attention);

  for (int task = 0; task < kNumTasks; ++task)
    maps.pred[static_cast<size_t>(task)] =
        heads_[static_cast<size_t>(task)].forward(t, maps.adapted[static_cast<size_t>(task)]);
  return maps;
}

ModelLosses MultiTaskModel::loss(Tape& t, const ForwardMaps& maps, const TrainingTargets& tg) {
  ModelLosses out;
  out.det_parts = det_loss(t, maps.pred[static_cast<size_t>(Task::detection)], tg.det);
  out.det = out.det_parts.total;
  SegLossResult seg = seg_loss(t, maps.pred[static_cast<size_t>(Task::segmentation)],
                               tg.seg_labels, kSegIgnoreIndex);
  out.seg = seg.loss;
  out.seg_all_ignored = seg.all_ignored;
  DepthLossResult dep =
      depth_loss(t, maps.pred[static_cast<size_t>(Task::depth)], tg.depth, tg.depth_mask);
  out.dep = dep.loss;
  out.dep_empty_mask = dep.empty_mask;
  LossWeights w{cfg_.lambda_det, cfg_.lambda_seg, cfg_.lambda_dep};
  out.total = total_loss(t, out.det, out.seg, out.dep, w);
  return out;
}

std::vector<Parameter*> MultiTaskModel::parameters() {
  std::vector<Parameter*> out;
  backbone_.collect(out);
  if (aggregator_) aggregator_->collect(out);
  if (context_) context_->collect(out);
  fusion_.collect(out);
  attention_.collect(out);
  for (auto& h : heads_) h.collect(out);
  return out;
}

int64_t MultiTaskModel::param_count() {
  int64_t n = 0;
  for (Parameter* p : parameters()) n += p->numel();
  return n;
}

void MultiTaskModel::zero_grads() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::vector<StageRow> MultiTaskModel::stage_table(int64_t input_h, int64_t input_w) const {
  Shape in = {1, cfg_.in_channels, input_h, input_w};
  BackboneShapes bs = backbone_.shapes(in);

  auto branched = [&](const Shape& low) {
    return bs.high ? format_hw(low) + ", " + format_hw(*bs.high) : format_hw(low);
  };

  std::vector<StageRow> rows;
  auto add = [&](const std::string& name, const std::string& out, Introspection s) {
    rows.push_back({name, out, s.params, s.macs});
  };

  add("stem", format_hw(bs.stem), backbone_.stem_stats(in));
  add("layer1", format_hw(bs.layer1), backbone_.layer1_stats(in));
  add("layer2", format_hw(bs.layer2), backbone_.layer2_stats(in));
  add("layer3", branched(bs.low3), backbone_.layer_stats(3, in));
  add("layer4", branched(bs.low4), backbone_.layer_stats(4, in));
  add("layer5", branched(bs.low5), backbone_.layer_stats(5, in));

  Shape agg_out;
  if (aggregator_) {
    std::vector<Shape> scales = {bs.low5, bs.low4, bs.low3};
    std::vector<Shape> stage_shapes = aggregator_->stage_shapes(scales);
    std::vector<Introspection> stage_stats = aggregator_->stage_stats(scales);
    for (size_t i = 0; i < stage_shapes.size(); ++i) {
      std::string name = "decode layer" + std::to_string(i + 1);
      std::string out =
          bs.high ? format_hw(stage_shapes[i]) + ", " + format_hw(*bs.high)
                  : format_hw(stage_shapes[i]);
      add(name, out, stage_stats[i]);
    }
    agg_out = aggregator_->out_shape(scales);
  } else {
    agg_out = context_->out_shape(bs.low5);
    add("context", bs.high ? format_hw(agg_out) + ", " + format_hw(*bs.high) : format_hw(agg_out),
        context_->stats(bs.low5));
  }

  Shape fused = fusion_.out_shape(agg_out);
  Introspection fusion_stats = fusion_.stats(agg_out, bs.high);
  Shape spatial_src = bs.high ? *bs.high : fused;
  fusion_stats += attention_.stats(bs.low5, spatial_src);
  add("fusion", format_hw(fused), fusion_stats);

  Introspection head_stats;
  for (const auto& h : heads_) head_stats += h.stats(fused);
  Shape head_out = heads_[static_cast<size_t>(Task::segmentation)].out_shape(fused);
  add("head (MTL)", format_hw(head_out), head_stats);
  return rows;
}

Introspection MultiTaskModel::totals(int64_t input_h, int64_t input_w) const {
  Introspection acc;
  for (const StageRow& r : stage_table(input_h, input_w)) {
    acc.params += r.params;
    acc.macs += r.macs;
  }
  return acc;
}

}  // namespace mtnet
