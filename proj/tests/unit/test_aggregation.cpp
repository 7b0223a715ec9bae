#include <doctest.h>

#include "mtnet/aggregation.hpp"
#include "mtnet/gradcheck.hpp"
#include "mtnet/model.hpp"
#include "test_util.hpp"

using namespace mtnet;
using mtnet::test::rand_tensor;

namespace {

// Independent transcription of the nested merge scan, kept deliberately
// line-for-line dumb: 1-based stage/scale indices over an N-entry list.
std::vector<std::pair<int, int>> merge_schedule_oracle(int n) {
  std::vector<std::pair<int, int>> visits;
  int idx1 = 1;
  int idx2 = 0;
  while (idx1 != n) {
    idx2 = idx1;
    while (idx2 != 0) {
      visits.emplace_back(idx1, idx2);
      idx2 = idx2 - 1;
    }
    idx1 = idx1 + 1;
  }
  return visits;
}

// Scale list with adjacent entries 2x apart in extent and channels,
// coarsest first; channels double toward the coarse end.
std::vector<Tensor> make_scales(RngStream& rng, int n, int fine_ch, int64_t fine_h,
                                int64_t fine_w) {
  std::vector<Tensor> out;
  for (int i = 0; i < n; ++i) {
    int shift = n - 1 - i;  // i == 0 is coarsest
    out.push_back(rand_tensor(rng, {1, fine_ch << shift, fine_h >> shift, fine_w >> shift}));
  }
  return out;
}

std::vector<int> channels_of(const std::vector<Tensor>& scales) {
  std::vector<int> ch;
  for (const Tensor& t : scales) ch.push_back(static_cast<int>(t.extent(1)));
  return ch;
}

}  // namespace

TEST_CASE("merge schedule matches the independent transcription for N in {2,3,4}") {
  RngStream rng(1);
  for (int n = 2; n <= 4; ++n) {
    auto scales = make_scales(rng, n, 4, 16, 24);
    Aggregator agg(channels_of(scales), rng);
    CHECK(agg.step_labels() == merge_schedule_oracle(n));

    Tape t;
    std::vector<Var> vars;
    for (const Tensor& s : scales) vars.push_back(t.leaf(s));
    AggregationTrace trace;
    Var out = agg.forward(t, vars, true, &trace);

    std::vector<std::pair<int, int>> visited;
    for (const auto& app : trace.apps) visited.emplace_back(app.idx1, app.idx2);
    CHECK(visited == merge_schedule_oracle(n));

    // Result lands at the finest scale with the finest channel count.
    CHECK(t.value(out).shape() == scales.back().shape());
  }
}

TEST_CASE("N=3 performs exactly 1 + 2 applications in decode order") {
  RngStream rng(2);
  auto scales = make_scales(rng, 3, 4, 8, 12);
  Aggregator agg(channels_of(scales), rng);
  std::vector<std::pair<int, int>> expect = {{1, 1}, {2, 2}, {2, 1}};
  CHECK(agg.step_labels() == expect);
  CHECK(agg.stage_shapes({scales[0].shape(), scales[1].shape(), scales[2].shape()}).size() == 2);
}

TEST_CASE("N=2 list performs exactly one application at the finer scale") {
  RngStream rng(3);
  auto scales = make_scales(rng, 2, 4, 8, 12);
  Aggregator agg(channels_of(scales), rng);
  Tape t;
  AggregationTrace trace;
  Var out = agg.forward(t, {t.leaf(scales[0]), t.leaf(scales[1])}, true, &trace);
  CHECK(trace.apps.size() == 1);
  CHECK(t.value(out).shape() == scales[1].shape());
}

TEST_CASE("fewer than two scales is rejected") {
  RngStream rng(4);
  CHECK_THROWS_AS(Aggregator({64}, rng), ConfigError);
}

TEST_CASE("merge step shapes at reference widths (symbolic)") {
  RngStream rng(5);
  AggregationStep f11("t.f11", 1024, 512, rng);
  CHECK(f11.out_shape({1, 1024, 16, 32}, {1, 512, 32, 64}) == Shape{1, 512, 32, 64});
  AggregationStep f22("t.f22", 512, 256, rng);
  CHECK(f22.out_shape({1, 512, 32, 64}, {1, 256, 64, 128}) == Shape{1, 256, 64, 128});
}

TEST_CASE("merge step rejects non-2x scale ratios") {
  RngStream rng(6);
  AggregationStep step("t.bad", 8, 4, rng);
  Tape t;
  Var coarse = t.leaf(Tensor::zeros({1, 8, 4, 4}));
  Var fine = t.leaf(Tensor::zeros({1, 4, 12, 12}));
  CHECK_THROWS_AS(step.forward(t, coarse, fine, true), ShapeError);
}

TEST_CASE("zero-initialized merge weights still give finite, shape-correct output") {
  RngStream rng(7);
  AggregationStep step("t.zero", 8, 4, rng);
  for (Parameter* p : [&] {
         std::vector<Parameter*> ps;
         step.collect(ps);
         return ps;
       }())
    for (int64_t i = 0; i < p->numel(); ++i) p->value[i] = 0.0;
  Tape t;
  Var out = step.forward(t, t.leaf(rand_tensor(rng, {1, 8, 3, 4})),
                         t.leaf(rand_tensor(rng, {1, 4, 6, 8})), true);
  CHECK(t.value(out).shape() == Shape{1, 4, 6, 8});
  CHECK(t.value(out).all_finite());
}

TEST_CASE("fusion combines the upsampled aggregate with the projected detail") {
  RngStream rng(8);
  FusionModule fuse(16, 12, true, rng);
  CHECK(fuse.out_shape({1, 16, 4, 8}) == Shape{1, 16, 8, 16});

  // Zero detail with the bias-free projection leaves pure upsampling.
  Tape t;
  Tensor agg = rand_tensor(rng, {1, 16, 4, 8}, 0.1, 1.0);
  Var h = fuse.forward(t, t.leaf(agg), t.leaf(Tensor::zeros({1, 12, 8, 16})), true);
  Tape t2;
  Var up = t2.bilinear_resize(t2.leaf(agg), 2);
  const Tensor& a = t.value(h);
  const Tensor& b = t2.value(up);
  REQUIRE(a.shape() == b.shape());
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("fusion validates branch wiring") {
  RngStream rng(9);
  FusionModule with_detail(8, 4, true, rng);
  FusionModule without_detail(8, 4, false, rng);
  Tape t;
  Var agg = t.leaf(Tensor::zeros({1, 8, 2, 4}));
  Var detail = t.leaf(Tensor::zeros({1, 4, 4, 8}));
  CHECK_THROWS_AS(with_detail.forward(t, agg, std::nullopt, true), ValueError);
  CHECK_THROWS_AS(without_detail.forward(t, agg, detail, true), ValueError);
  CHECK(t.value(without_detail.forward(t, agg, std::nullopt, true)).shape() ==
        Shape{1, 8, 4, 8});
}

TEST_CASE("gradcheck through fusion") {
  RngStream rng(10);
  auto fuse = std::make_shared<FusionModule>(4, 3, true, rng);
  Tensor agg = rand_tensor(rng, {1, 4, 2, 3});
  Tensor detail = rand_tensor(rng, {1, 3, 4, 6});
  auto fn = [fuse, detail](Tape& t, Var v) {
    return t.sum(fuse->forward(t, v, t.constant(detail), true));
  };
  CHECK(finite_diff_check(fn, agg, 1e-3).max_rel_err < 1e-4);
}

TEST_CASE("context substitute keeps downstream shapes when aggregation is off") {
  ModelConfig on = test::small_config();
  ModelConfig off = test::small_config();
  off.use_aggregation = false;
  MultiTaskModel m_on(on, 0);
  MultiTaskModel m_off(off, 0);
  RngStream data(11);
  Tensor img = rand_tensor(data, {1, 3, 64, 128}, 0.0, 1.0);
  Tape ta, tb;
  ForwardMaps a = m_on.forward(ta, ta.leaf(img), true);
  ForwardMaps b = m_off.forward(tb, tb.leaf(img), true);
  CHECK(ta.value(a.aggregated).shape() == tb.value(b.aggregated).shape());
  CHECK(ta.value(a.fused).shape() == tb.value(b.fused).shape());
  for (int task = 0; task < kNumTasks; ++task)
    CHECK(ta.value(a.pred[task]).shape() == tb.value(b.pred[task]).shape());
}
