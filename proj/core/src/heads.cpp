#include "mtnet/heads.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mtnet {

TaskHead::TaskHead(const std::string& name, int in_ch, int out_ch, int upsample_, RngStream& rng)
    : upsample(upsample_),
      c1(name + ".b1.conv3", in_ch, in_ch, 3, 1, 1, 1, true, rng),
      c2(name + ".b1.conv1", in_ch, in_ch, 1, 1, 1, 0, true, rng),
      c3(name + ".b2.conv3", in_ch, in_ch, 3, 1, 1, 1, true, rng),
      c4(name + ".b2.conv1", in_ch, out_ch, 1, 1, 1, 0, true, rng) {}

Var TaskHead::forward(Tape& t, Var h_t) {
  Var y = c2.forward(t, t.relu(c1.forward(t, h_t)));
  y = c4.forward(t, t.relu(c3.forward(t, y)));
  if (upsample > 1) y = t.bilinear_resize(y, upsample);
  return y;
}

Shape TaskHead::out_shape(const Shape& in) const {
  Shape s = c4.out_shape(c3.out_shape(c2.out_shape(c1.out_shape(in))));
  s[2] *= upsample;
  s[3] *= upsample;
  return s;
}

Introspection TaskHead::stats(const Shape& in) const {
  Introspection acc = c1.stats(in);
  Shape s = c1.out_shape(in);
  acc += c2.stats(s);
  s = c2.out_shape(s);
  acc += c3.stats(s);
  s = c3.out_shape(s);
  acc += c4.stats(s);
  s = c4.out_shape(s);
  if (upsample > 1) {
    s[2] *= upsample;
    s[3] *= upsample;
    acc.macs += resize_macs(s);
  }
  return acc;
}

void TaskHead::collect(std::vector<Parameter*>& out) {
  c1.collect(out);
  c2.collect(out);
  c3.collect(out);
  c4.collect(out);
}

// ---------------------------------------------------------------- losses

SegLossResult seg_loss(Tape& t, Var logits, const Tensor& labels, int ignore_index) {
  SegLossResult r;
  r.loss = t.softmax_cross_entropy(logits, labels, ignore_index, &r.all_ignored);
  return r;
}

DepthLossResult depth_loss(Tape& t, Var pred, const Tensor& gt, const Tensor& valid_mask) {
  DepthLossResult r;
  r.loss = t.smooth_l1(pred, gt, valid_mask, &r.empty_mask);
  return r;
}

DetLossParts det_loss(Tape& t, Var pred, const DetectionTargets& tg) {
  const Shape& ps = t.value(pred).shape();
  if (ps.size() != 4) throw ShapeError("det_loss: prediction must be 4-D, got " + shape_str(ps));
  const int64_t k = tg.num_classes, nb = tg.num_bins;
  const int64_t want = k + 2 + 1 + 3 + 2 * nb + 2;
  if (ps[1] != want)
    throw ShapeError("det_loss: prediction has " + std::to_string(ps[1]) +
                     " channels, expected " + std::to_string(want));
  if (tg.heatmap.rank() != 4 || tg.heatmap.extent(1) != k || tg.heatmap.extent(2) != ps[2] ||
      tg.heatmap.extent(3) != ps[3])
    throw ShapeError("det_loss: heatmap target " + tg.heatmap.shape_string() +
                     " does not match prediction " + shape_str(ps));

  int64_t c = 0;
  Var hm = t.slice_channels(pred, c, c + k);
  c += k;
  Var off = t.slice_channels(pred, c, c + 2);
  c += 2;
  Var dep = t.slice_channels(pred, c, c + 1);
  c += 1;
  Var sz = t.slice_channels(pred, c, c + 3);
  c += 3;
  Var ybin = t.slice_channels(pred, c, c + nb);
  c += nb;
  Var yres = t.slice_channels(pred, c, c + nb);
  c += nb;
  Var pr = t.slice_channels(pred, c, c + 2);

  DetLossParts parts;
  parts.heatmap = t.focal_heatmap(hm, tg.heatmap);
  parts.offset = t.l1_masked(off, tg.offset, tg.mask);
  parts.depth = t.l1_masked(dep, tg.depth, tg.mask);
  parts.size3d = t.l1_masked(sz, tg.size3d, tg.mask);
  parts.yaw_cls = t.bin_cross_entropy(ybin, tg.yaw_bin, tg.mask);
  parts.yaw_res = t.select_channel_l1(yres, tg.yaw_bin, tg.yaw_res, tg.mask);
  parts.pitch_roll = t.l1_masked(pr, tg.pitch_roll, tg.mask);

  Var total = t.add(parts.heatmap, parts.offset);
  total = t.add(total, parts.depth);
  total = t.add(total, parts.size3d);
  total = t.add(total, parts.yaw_cls);
  total = t.add(total, parts.yaw_res);
  parts.total = t.add(total, parts.pitch_roll);
  return parts;
}

Var total_loss(Tape& t, Var l_det, Var l_seg, Var l_dep, const LossWeights& w) {
  const char* names[3] = {"det", "seg", "dep"};
  Var vars[3] = {l_det, l_seg, l_dep};
  for (int i = 0; i < 3; ++i) {
    if (!t.value(vars[i]).all_finite())
      throw ValueError(std::string("total_loss: non-finite ") + names[i] + " component");
  }
  Var out = t.add(t.add(t.scale(l_det, w.det), t.scale(l_seg, w.seg)), t.scale(l_dep, w.dep));
  return out;
}

// ---------------------------------------------------------------- fixture I/O

namespace fs = std::filesystem;
using nlohmann::json;

void write_detection_targets(const std::string& dir, const DetectionTargets& t) {
  fs::create_directories(dir);
  json j;
  j["num_classes"] = t.num_classes;
  j["num_bins"] = t.num_bins;
  j["maps"] = {"heatmap", "offset", "depth", "size3d", "yaw_bin", "yaw_res", "pitch_roll",
               "mask"};
  std::ofstream os(dir + "/targets.json");
  if (!os) throw IoError("cannot write " + dir + "/targets.json");
  os << j.dump(2) << "\n";
  write_tensor(dir + "/heatmap.tnsr", t.heatmap);
  write_tensor(dir + "/offset.tnsr", t.offset);
  write_tensor(dir + "/depth.tnsr", t.depth);
  write_tensor(dir + "/size3d.tnsr", t.size3d);
  write_tensor(dir + "/yaw_bin.tnsr", t.yaw_bin);
  write_tensor(dir + "/yaw_res.tnsr", t.yaw_res);
  write_tensor(dir + "/pitch_roll.tnsr", t.pitch_roll);
  write_tensor(dir + "/mask.tnsr", t.mask);
}

DetectionTargets read_detection_targets(const std::string& dir) {
  std::ifstream is(dir + "/targets.json");
  if (!is) throw IoError("cannot read " + dir + "/targets.json");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed targets.json: ") + e.what());
  }
  DetectionTargets t;
  t.num_classes = j.at("num_classes").get<int>();
  t.num_bins = j.at("num_bins").get<int>();
  t.heatmap = read_tensor(dir + "/heatmap.tnsr");
  t.offset = read_tensor(dir + "/offset.tnsr");
  t.depth = read_tensor(dir + "/depth.tnsr");
  t.size3d = read_tensor(dir + "/size3d.tnsr");
  t.yaw_bin = read_tensor(dir + "/yaw_bin.tnsr");
  t.yaw_res = read_tensor(dir + "/yaw_res.tnsr");
  t.pitch_roll = read_tensor(dir + "/pitch_roll.tnsr");
  t.mask = read_tensor(dir + "/mask.tnsr");
  return t;
}

}  // namespace mtnet
