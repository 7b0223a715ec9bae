#include "mtnet/attention.hpp"

namespace mtnet {

ChannelAttentionHead::ChannelAttentionHead(const std::string& name, int in_ch_, int hidden,
                                           int out_ch_, RngStream& rng)
    : in_ch(in_ch_),
      out_ch(out_ch_),
      fc1(name + ".fc1", in_ch_, hidden, rng),
      fc2(name + ".fc2", hidden, out_ch_, rng) {}

Var ChannelAttentionHead::forward(Tape& t, Var semantic) {
  const Shape& s = t.value(semantic).shape();
  if (s.size() != 4 || s[1] != in_ch)
    throw ShapeError("channel attention: expected (B," + std::to_string(in_ch) +
                     ",h,w), got " + shape_str(s));
  Var pooled = t.global_avg_pool(semantic);
  Var flat = t.reshape(pooled, {s[0], in_ch});
  Var hid = t.relu(fc1.forward(t, flat));
  Var out = fc2.forward(t, hid);
  Var gate = t.reshape(out, {s[0], out_ch, 1, 1});
  return t.sigmoid(gate);
}

Introspection ChannelAttentionHead::stats(const Shape& in) const {
  Introspection s;
  s.macs += pool_macs(in);
  s += fc1.stats(in[0]);
  s += fc2.stats(in[0]);
  return s;
}

void ChannelAttentionHead::collect(std::vector<Parameter*>& out) {
  fc1.collect(out);
  fc2.collect(out);
}

SpatialAttentionHead::SpatialAttentionHead(const std::string& name, int in_ch, int out_ch,
                                           int dilation, RngStream& rng)
    : conv(name + ".conv", in_ch, out_ch, 3, 1, dilation, dilation, /*with_bias=*/true, rng) {}

Var SpatialAttentionHead::forward(Tape& t, Var detail) {
  return t.sigmoid(conv.forward(t, detail));
}

Introspection SpatialAttentionHead::stats(const Shape& in) const { return conv.stats(in); }

void SpatialAttentionHead::collect(std::vector<Parameter*>& out) { conv.collect(out); }

Var task_adapt(Tape& t, Var h, std::optional<Var> alpha, std::optional<Var> beta) {
  Var out = h;
  if (alpha) out = t.mul_channelwise(out, *alpha);
  if (beta) {
    const Shape& hs = t.value(h).shape();
    const Shape& bs = t.value(*beta).shape();
    if (bs.size() != 4 || bs[0] != hs[0] || bs[2] != hs[2] || bs[3] != hs[3] ||
        (bs[1] != 1 && bs[1] != hs[1]))
      throw ShapeError("task_adapt: spatial map " + shape_str(bs) + " does not broadcast onto " +
                       shape_str(hs));
    out = t.add(out, *beta);
  }
  return out;
}

TaskAttentionGenerator::TaskAttentionGenerator(const ModelConfig& cfg, int spatial_src_ch,
                                               RngStream& rng) {
  if (cfg.use_channel_attention) {
    channel_heads_.reserve(kNumTasks);
    for (int task = 0; task < kNumTasks; ++task)
      channel_heads_.emplace_back(std::string("attn.ch.") + kTaskNames[static_cast<size_t>(task)],
                                  cfg.low_channels.back(), cfg.attn_hidden, cfg.fused_channels,
                                  rng);
  }
  if (cfg.use_spatial_attention)
    spatial_.emplace("attn.sp", spatial_src_ch, cfg.beta_per_channel ? cfg.fused_channels : 1,
                     cfg.attn_dilation, rng);
}

Var TaskAttentionGenerator::channel_attention(Tape& t, Var semantic, int task) {
  if (task < 0 || task >= static_cast<int>(channel_heads_.size()))
    throw ValueError("channel_attention: task index " + std::to_string(task) + " out of range");
  return channel_heads_[static_cast<size_t>(task)].forward(t, semantic);
}

AttentionMaps TaskAttentionGenerator::forward(Tape& t, Var semantic, Var spatial_src) {
  AttentionMaps maps;
  if (!channel_heads_.empty())
    for (int task = 0; task < kNumTasks; ++task)
      maps.alpha[static_cast<size_t>(task)] = channel_attention(t, semantic, task);
  if (spatial_) maps.beta = spatial_->forward(t, spatial_src);
  return maps;
}

std::array<Var, kNumTasks> TaskAttentionGenerator::adapt_all(Tape& t, Var h,
                                                             const AttentionMaps& maps) {
  std::array<Var, kNumTasks> out;
  for (int task = 0; task < kNumTasks; ++task)
    out[static_cast<size_t>(task)] = task_adapt(t, h, maps.alpha[static_cast<size_t>(task)],
                                                maps.beta);
  return out;
}

Introspection TaskAttentionGenerator::stats(const Shape& semantic,
                                            const Shape& spatial_src) const {
  Introspection acc;
  for (const auto& head : channel_heads_) acc += head.stats(semantic);
  if (spatial_) acc += spatial_->stats(spatial_src);
  return acc;
}

void TaskAttentionGenerator::collect(std::vector<Parameter*>& out) {
  for (auto& head : channel_heads_) head.collect(out);
  if (spatial_) spatial_->collect(out);
}

}  // namespace mtnet
