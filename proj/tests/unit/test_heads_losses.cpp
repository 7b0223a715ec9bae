#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "mtnet/gradcheck.hpp"
#include "mtnet/heads.hpp"
#include "mtnet/model.hpp"
#include "mtnet/synthetic.hpp"
#include "test_util.hpp"

using namespace mtnet;
using mtnet::test::rand_tensor;

namespace {

DetectionTargets empty_targets(int64_t b, int k, int nb, int64_t hm, int64_t wm) {
  DetectionTargets t;
  t.heatmap = Tensor::zeros({b, k, hm, wm});
  t.offset = Tensor::zeros({b, 2, hm, wm});
  t.depth = Tensor::zeros({b, 1, hm, wm});
  t.size3d = Tensor::zeros({b, 3, hm, wm});
  t.yaw_bin = Tensor::zeros({b, 1, hm, wm});
  t.yaw_res = Tensor::zeros({b, 1, hm, wm});
  t.pitch_roll = Tensor::zeros({b, 2, hm, wm});
  t.mask = Tensor::zeros({b, 1, hm, wm});
  t.num_classes = k;
  t.num_bins = nb;
  return t;
}

}  // namespace

TEST_CASE("task head output shapes at reference widths (symbolic)") {
  RngStream rng(1);
  TaskHead seg("t.seg", 256, 19, 8, rng);
  CHECK(seg.out_shape({1, 256, 128, 256}) == Shape{1, 19, 1024, 2048});
  TaskHead dep("t.dep", 256, 1, 8, rng);
  CHECK(dep.out_shape({1, 256, 128, 256}) == Shape{1, 1, 1024, 2048});
  CHECK(seg.out_shape({1, 256, 8, 16}) == Shape{1, 19, 64, 128});
  TaskHead det("t.det", 256, 40, 1, rng);
  CHECK(det.out_shape({1, 256, 8, 16}) == Shape{1, 40, 8, 16});
}

TEST_CASE("task head forward at desk scale") {
  RngStream rng(2);
  TaskHead head("t.h", 8, 5, 8, rng);
  Tape t;
  RngStream data(3);
  Var y = head.forward(t, t.leaf(rand_tensor(data, {1, 8, 8, 16})));
  CHECK(t.value(y).shape() == Shape{1, 5, 64, 128});
  CHECK_THROWS_AS(head.forward(t, t.leaf(Tensor::zeros({1, 4, 8, 16}))), ShapeError);
}

TEST_CASE("uniform segmentation logits cost ln(K)") {
  Tape t;
  Var logits = t.leaf(Tensor::zeros({1, 19, 4, 4}));
  Tensor labels = Tensor::zeros({1, 1, 4, 4});
  SegLossResult r = seg_loss(t, logits, labels, 255);
  CHECK(t.value(r.loss)[0] == doctest::Approx(std::log(19.0)).epsilon(1e-12));
  CHECK(!r.all_ignored);
}

TEST_CASE("confident correct logits drive the loss to zero") {
  Tape t;
  Tensor z = Tensor::zeros({1, 5, 2, 2});
  Tensor labels = Tensor::zeros({1, 1, 2, 2});
  for (int64_t i = 0; i < 4; ++i) {
    int64_t cls = i % 5;
    labels[i] = static_cast<double>(cls);
    z[cls * 4 + i] = 20.0;  // margin 20 over the others
  }
  SegLossResult r = seg_loss(t, t.leaf(z), labels, 255);
  CHECK(t.value(r.loss)[0] < 1e-8);
  CHECK(t.value(r.loss)[0] >= 0.0);
}

TEST_CASE("all-ignored segmentation is zero with the flag set") {
  Tape t;
  Var logits = t.leaf(Tensor::zeros({1, 3, 2, 2}), true);
  Tensor labels = Tensor::full({1, 1, 2, 2}, 255.0);
  SegLossResult r = seg_loss(t, logits, labels, 255);
  CHECK(t.value(r.loss)[0] == 0.0);
  CHECK(r.all_ignored);
}

TEST_CASE("out-of-range labels are rejected") {
  Tape t;
  Var logits = t.leaf(Tensor::zeros({1, 3, 1, 2}));
  CHECK_THROWS_AS(seg_loss(t, logits, Tensor::from({1, 1, 1, 2}, {0.0, 3.0}), 255), ValueError);
}

TEST_CASE("depth loss branch values") {
  Tape t;
  Tensor mask = Tensor::full({1, 1, 2, 2}, 1.0);
  // Quadratic branch: residual 0.5 -> 0.5 * 0.25 = 0.125.
  DepthLossResult a = depth_loss(t, t.leaf(Tensor::full({1, 1, 2, 2}, 0.5)),
                                 Tensor::zeros({1, 1, 2, 2}), mask);
  CHECK(t.value(a.loss)[0] == doctest::Approx(0.125).epsilon(1e-15));
  // Linear branch: residual 2.0 -> 2.0 - 0.5 = 1.5.
  DepthLossResult b = depth_loss(t, t.leaf(Tensor::full({1, 1, 2, 2}, 2.0)),
                                 Tensor::zeros({1, 1, 2, 2}), mask);
  CHECK(t.value(b.loss)[0] == doctest::Approx(1.5).epsilon(1e-15));
  // Empty mask: defined as zero, flagged.
  DepthLossResult c = depth_loss(t, t.leaf(Tensor::zeros({1, 1, 2, 2})),
                                 Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 2, 2}));
  CHECK(t.value(c.loss)[0] == 0.0);
  CHECK(c.empty_mask);
}

TEST_CASE("depth loss matches a scalar-loop oracle on mixed residuals") {
  Tape t;
  RngStream rng(4);
  Tensor pred = rand_tensor(rng, {1, 1, 4, 6}, -3.0, 3.0);
  Tensor gt = rand_tensor(rng, {1, 1, 4, 6}, -3.0, 3.0);
  Tensor mask = Tensor::zeros({1, 1, 4, 6});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.7 ? 1.0 : 0.0;
  mask[0] = 1.0;
  DepthLossResult r = depth_loss(t, t.leaf(pred), gt, mask);
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (mask[i] == 0.0) continue;
    double d = pred[i] - gt[i];
    acc += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
    ++count;
  }
  CHECK(t.value(r.loss)[0] == doctest::Approx(acc / count).epsilon(1e-14));
}

TEST_CASE("zero-object detection: regression terms vanish, focal matches closed form") {
  const int k = 3, nb = 4;
  const int64_t hm = 4, wm = 6;
  DetectionTargets tg = empty_targets(1, k, nb, hm, wm);
  Tape t;
  // Background predictions: strongly negative heatmap logits everywhere.
  Tensor pred = Tensor::zeros({1, k + 2 + 1 + 3 + 2 * nb + 2, hm, wm});
  const double z = -6.0;
  for (int64_t i = 0; i < k * hm * wm; ++i) pred[i] = z;
  DetLossParts parts = det_loss(t, t.leaf(pred), tg);
  CHECK(t.value(parts.offset)[0] == 0.0);
  CHECK(t.value(parts.depth)[0] == 0.0);
  CHECK(t.value(parts.size3d)[0] == 0.0);
  CHECK(t.value(parts.yaw_cls)[0] == 0.0);
  CHECK(t.value(parts.yaw_res)[0] == 0.0);
  CHECK(t.value(parts.pitch_roll)[0] == 0.0);
  // Closed form: every cell is background with target 0, so the loss is
  // -(1/max(1,0)) * N * p^2 log(1-p) with p = sigmoid(z).
  double p = 1.0 / (1.0 + std::exp(-z));
  double expect = -static_cast<double>(k * hm * wm) * p * p * std::log(1.0 - p);
  CHECK(t.value(parts.heatmap)[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(t.value(parts.total)[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("perfect predictions on a one-object target cost < 1e-6") {
  const int k = 3, nb = 4;
  const int64_t hm = 4, wm = 6;
  DetectionTargets tg = empty_targets(1, k, nb, hm, wm);
  const int64_t cy = 1, cx = 2, cls = 1, bin = 2;
  tg.heatmap[(cls * hm + cy) * wm + cx] = 1.0;
  tg.mask[cy * wm + cx] = 1.0;
  tg.offset[(0 * hm + cy) * wm + cx] = 0.25;
  tg.offset[(1 * hm + cy) * wm + cx] = 0.75;
  tg.depth[cy * wm + cx] = 12.5;
  for (int d = 0; d < 3; ++d) tg.size3d[(d * hm + cy) * wm + cx] = 1.5 + d;
  tg.yaw_bin[cy * wm + cx] = bin;
  tg.yaw_res[cy * wm + cx] = -0.125;
  tg.pitch_roll[(0 * hm + cy) * wm + cx] = 0.05;
  tg.pitch_roll[(1 * hm + cy) * wm + cx] = -0.02;

  Tensor pred = Tensor::zeros({1, k + 2 + 1 + 3 + 2 * nb + 2, hm, wm});
  auto at = [&](int64_t c, int64_t y, int64_t x) -> double& {
    return pred[(c * hm + y) * wm + x];
  };
  // Saturated heatmap logits: +40 at the peak, -40 elsewhere.
  for (int64_t c = 0; c < k; ++c)
    for (int64_t y = 0; y < hm; ++y)
      for (int64_t x = 0; x < wm; ++x) at(c, y, x) = -40.0;
  at(cls, cy, cx) = 40.0;
  int64_t c0 = k;
  at(c0 + 0, cy, cx) = 0.25;
  at(c0 + 1, cy, cx) = 0.75;
  at(c0 + 2, cy, cx) = 12.5;
  for (int d = 0; d < 3; ++d) at(c0 + 3 + d, cy, cx) = 1.5 + d;
  // Yaw bins: saturated logits on the true bin, exact residual.
  for (int b = 0; b < nb; ++b) at(c0 + 6 + b, cy, cx) = (b == bin) ? 40.0 : -40.0;
  at(c0 + 6 + nb + bin, cy, cx) = -0.125;
  at(c0 + 6 + 2 * nb + 0, cy, cx) = 0.05;
  at(c0 + 6 + 2 * nb + 1, cy, cx) = -0.02;

  Tape t;
  DetLossParts parts = det_loss(t, t.leaf(pred), tg);
  CHECK(t.value(parts.total)[0] < 1e-6);
  CHECK(t.value(parts.total)[0] >= 0.0);
}

TEST_CASE("composite detection loss gradcheck away from kinks") {
  const int k = 2, nb = 3;
  const int64_t hm = 3, wm = 4;
  RngStream rng(5);
  DetectionTargets tg = empty_targets(1, k, nb, hm, wm);
  // One object plus soft background values; targets offset from the random
  // predictions so no L1 residual sits near zero.
  tg.heatmap = rand_tensor(rng, {1, k, hm, wm}, 0.0, 0.9);
  tg.heatmap[(0 * hm + 1) * wm + 1] = 1.0;
  tg.mask[1 * wm + 1] = 1.0;
  tg.mask[2 * wm + 3] = 1.0;
  tg.yaw_bin[1 * wm + 1] = 1.0;
  tg.yaw_bin[2 * wm + 3] = 2.0;
  Tensor pred = rand_tensor(rng, {1, k + 2 + 1 + 3 + 2 * nb + 2, hm, wm}, -1.5, 1.5);
  for (Tensor* target : {&tg.offset, &tg.depth, &tg.size3d, &tg.yaw_res, &tg.pitch_roll}) {
    for (int64_t i = 0; i < target->numel(); ++i) (*target)[i] = 3.0 + 0.1 * (i % 5);
  }
  auto fn = [tg](Tape& t, Var v) {
    DetLossParts parts = det_loss(t, v, tg);
    return parts.total;
  };
  CHECK(finite_diff_check(fn, pred, 1e-4).max_rel_err < 1e-4);
}

TEST_CASE("detection loss validates channel budget and target shapes") {
  DetectionTargets tg = empty_targets(1, 3, 4, 4, 6);
  Tape t;
  CHECK_THROWS_AS(det_loss(t, t.leaf(Tensor::zeros({1, 10, 4, 6})), tg), ShapeError);
  CHECK_THROWS_AS(det_loss(t, t.leaf(Tensor::zeros({1, 17, 2, 6})), tg), ShapeError);
}

TEST_CASE("weighted task sum is exact arithmetic") {
  Tape t;
  LossWeights w;  // 1, 100, 1
  Var total = total_loss(t, t.leaf(Tensor::scalar(1.0)), t.leaf(Tensor::scalar(0.02)),
                         t.leaf(Tensor::scalar(3.0)), w);
  CHECK(t.value(total)[0] == doctest::Approx(6.0).epsilon(1e-15));
  Var zero = total_loss(t, t.leaf(Tensor::scalar(0.0)), t.leaf(Tensor::scalar(0.0)),
                        t.leaf(Tensor::scalar(0.0)), w);
  CHECK(t.value(zero)[0] == 0.0);
}

TEST_CASE("default weights follow the 1/100/1 scheme") {
  LossWeights w;
  CHECK(w.det == 1.0);
  CHECK(w.seg == 100.0);
  CHECK(w.dep == 1.0);
  ModelConfig cfg;
  CHECK(cfg.lambda_det == 1.0);
  CHECK(cfg.lambda_seg == 100.0);
  CHECK(cfg.lambda_dep == 1.0);
}

TEST_CASE("non-finite components are rejected naming the task") {
  Tape t;
  Var ok = t.leaf(Tensor::scalar(1.0));
  Var bad = t.leaf(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
  try {
    total_loss(t, ok, bad, ok, LossWeights{});
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("seg") != std::string::npos);
  }
}

TEST_CASE("each task loss sends gradient into backbone and attention parameters") {
  ModelConfig cfg = test::small_config();
  MultiTaskModel model(cfg, 9);
  SyntheticSample sample = generate_synthetic(9, 64, 128, 1, cfg);
  for (int task = 0; task < kNumTasks; ++task) {
    Tape t;
    ForwardMaps maps = model.forward(t, t.leaf(sample.image), true);
    ModelLosses losses = model.loss(t, maps, sample.targets);
    Var task_loss = task == 0 ? losses.det : (task == 1 ? losses.seg : losses.dep);
    model.zero_grads();
    t.backward(task_loss);
    double stem_norm = 0.0, attn_norm = 0.0;
    for (Parameter* p : model.parameters()) {
      double norm = 0.0;
      for (int64_t i = 0; i < p->grad.numel(); ++i) norm += p->grad[i] * p->grad[i];
      if (p->name.rfind("stem.", 0) == 0) stem_norm += norm;
      if (p->name.rfind("attn.", 0) == 0) attn_norm += norm;
    }
    CHECK(stem_norm > 0.0);
    CHECK(attn_norm > 0.0);
  }
}

TEST_CASE("detection target fixtures round-trip through JSON+binary") {
  ModelConfig cfg = test::small_config();
  SyntheticSample s = generate_synthetic(21, 64, 128, 1, cfg);
  std::string dir = std::string(std::filesystem::temp_directory_path()) + "/mtnet_det_fixture";
  write_detection_targets(dir, s.targets.det);
  DetectionTargets back = read_detection_targets(dir);
  CHECK(back.num_classes == s.targets.det.num_classes);
  CHECK(back.num_bins == s.targets.det.num_bins);
  REQUIRE(back.heatmap.shape() == s.targets.det.heatmap.shape());
  for (int64_t i = 0; i < back.heatmap.numel(); ++i)
    CHECK(back.heatmap[i] == s.targets.det.heatmap[i]);
  for (int64_t i = 0; i < back.mask.numel(); ++i) CHECK(back.mask[i] == s.targets.det.mask[i]);
  std::filesystem::remove_all(dir);
}

TEST_CASE("losses are invariant under consistent pixel permutation") {
  RngStream rng(31);
  Tensor pred = rand_tensor(rng, {1, 1, 2, 6}, -2.0, 2.0);
  Tensor gt = rand_tensor(rng, {1, 1, 2, 6}, -2.0, 2.0);
  Tensor mask = Tensor::zeros({1, 1, 2, 6});
  for (int64_t i = 0; i < 12; ++i) mask[i] = i % 3 == 0 ? 0.0 : 1.0;
  // Reverse the flattened pixel order in all three maps.
  Tensor pred_r = pred, gt_r = gt, mask_r = mask;
  for (int64_t i = 0; i < 12; ++i) {
    pred_r[i] = pred[11 - i];
    gt_r[i] = gt[11 - i];
    mask_r[i] = mask[11 - i];
  }
  Tape t;
  DepthLossResult a = depth_loss(t, t.leaf(pred), gt, mask);
  DepthLossResult b = depth_loss(t, t.leaf(pred_r), gt_r, mask_r);
  CHECK(t.value(a.loss)[0] == doctest::Approx(t.value(b.loss)[0]).epsilon(1e-15));
}
