#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <sstream>

#include "mtnet/aggregation.hpp"
#include "mtnet/attention.hpp"
#include "mtnet/harness.hpp"
#include "mtnet/heads.hpp"
#include "mtnet/layers.hpp"

namespace mtnet {

namespace {

Tensor rand_t(RngStream& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Magnitudes clear of zero so an eps probe cannot cross the kink.
Tensor rand_away_from_zero(RngStream& rng, Shape shape, double margin) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double mag = rng.uniform(margin, 1.0);
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

Tensor rand_mask(RngStream& rng, Shape shape, double keep = 0.6) {
  Tensor t = Tensor::zeros(std::move(shape));
  bool any = false;
  for (int64_t i = 0; i < t.numel(); ++i) {
    t[i] = rng.uniform() < keep ? 1.0 : 0.0;
    any = any || t[i] == 1.0;
  }
  if (!any) t[0] = 1.0;
  return t;
}

// Smooth-L1 / L1 residual magnitudes clear of both kinks (0 and +-1).
Tensor rand_residual(RngStream& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    double mag = rng.uniform() < 0.5 ? rng.uniform(0.1, 0.85) : rng.uniform(1.15, 2.0);
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace

std::vector<GradcheckComponent> standard_gradcheck_components(uint64_t seed) {
  RngStream rng(seed);
  std::vector<GradcheckComponent> out;
  auto comp = [&](const std::string& name, Tensor probe, ScalarFn fn) {
    out.push_back({name, std::move(probe), 1e-3, 1e-4, false, std::move(fn)});
  };
  // Composite layers with interior relus: small step plus one-sided
  // fallback at kink-adjacent coordinates.
  auto comp_composite = [&](const std::string& name, Tensor probe, ScalarFn fn) {
    out.push_back({name, std::move(probe), 1e-5, 1e-4, true, std::move(fn)});
  };

  // conv2d, both sides, plus the strided and dilated variants
  {
    Tensor w = rand_t(rng, {4, 3, 3, 3}, -0.5, 0.5);
    Tensor x = rand_t(rng, {1, 3, 6, 8});
    comp("op.conv.input", x, [w](Tape& t, Var v) {
      return t.sum(t.conv2d(v, t.constant(w), ConvSpec{1, 1, 1}));
    });
    comp("op.conv.weight", w, [x](Tape& t, Var v) {
      return t.sum(t.conv2d(t.constant(x), v, ConvSpec{1, 1, 1}));
    });
  }
  comp("op.conv.strided.input", rand_t(rng, {1, 2, 7, 9}),
       [w = rand_t(rng, {3, 2, 3, 3}, -0.5, 0.5)](Tape& t, Var v) {
         return t.sum(t.conv2d(v, t.constant(w), ConvSpec{2, 1, 1}));
       });
  comp("op.conv.dilated.input", rand_t(rng, {1, 2, 8, 8}),
       [w = rand_t(rng, {3, 2, 3, 3}, -0.5, 0.5)](Tape& t, Var v) {
         return t.sum(t.conv2d(v, t.constant(w), ConvSpec{1, 2, 2}));
       });

  // batch norm: training statistics and eval (running-stat) paths. The
  // probe loss is a randomly weighted sum: a plain sum is degenerate
  // (normalized values sum to zero per channel by construction).
  {
    Tensor x = rand_t(rng, {2, 3, 4, 5});
    Tensor gamma = rand_t(rng, {3}, 0.5, 1.5);
    Tensor shift = rand_t(rng, {3}, -0.5, 0.5);
    Tensor lw = rand_t(rng, {2, 3, 4, 5});
    comp("op.norm.train.input", x, [gamma, shift, lw](Tape& t, Var v) {
      BatchNormState st(3);
      return t.sum(t.mul(t.batch_norm(v, t.constant(gamma), t.constant(shift), st, true),
                         t.constant(lw)));
    });
    comp("op.norm.train.gamma", gamma, [x, shift, lw](Tape& t, Var v) {
      BatchNormState st(3);
      return t.sum(t.mul(t.batch_norm(t.constant(x), v, t.constant(shift), st, true),
                         t.constant(lw)));
    });
    comp("op.norm.train.shift", shift, [x, gamma, lw](Tape& t, Var v) {
      BatchNormState st(3);
      return t.sum(t.mul(t.batch_norm(t.constant(x), t.constant(gamma), v, st, true),
                         t.constant(lw)));
    });
    comp("op.norm.eval.input", x, [gamma, shift, lw](Tape& t, Var v) {
      BatchNormState st(3);
      st.running_mean = Tensor::from({3}, {0.1, -0.2, 0.05});
      st.running_var = Tensor::from({3}, {0.8, 1.3, 0.6});
      return t.sum(t.mul(t.batch_norm(v, t.constant(gamma), t.constant(shift), st, false),
                         t.constant(lw)));
    });
  }

  // activations; relu sampled clear of its kink
  comp("op.relu", rand_away_from_zero(rng, {2, 3, 4, 4}, 0.05),
       [](Tape& t, Var v) { return t.sum(t.relu(v)); });
  comp("op.sigmoid", rand_t(rng, {2, 3, 4, 4}, -3.0, 3.0),
       [](Tape& t, Var v) { return t.sum(t.sigmoid(v)); });

  // resize / pool
  comp("op.resize.x2", rand_t(rng, {1, 3, 4, 6}),
       [](Tape& t, Var v) { return t.sum(t.bilinear_resize(v, 2)); });
  comp("op.resize.x8", rand_t(rng, {1, 2, 2, 3}),
       [](Tape& t, Var v) { return t.sum(t.bilinear_resize(v, 8)); });
  comp("op.pool", rand_t(rng, {1, 4, 5, 7}),
       [](Tape& t, Var v) { return t.sum(t.global_avg_pool(v)); });

  // linear, all three sides
  {
    Tensor x = rand_t(rng, {3, 6});
    Tensor w = rand_t(rng, {4, 6}, -0.5, 0.5);
    Tensor b = rand_t(rng, {4});
    comp("op.linear.input", x, [w, b](Tape& t, Var v) {
      return t.sum(t.linear(v, t.constant(w), t.constant(b)));
    });
    comp("op.linear.weight", w, [x, b](Tape& t, Var v) {
      return t.sum(t.linear(t.constant(x), v, t.constant(b)));
    });
    comp("op.linear.bias", b, [x, w](Tape& t, Var v) {
      return t.sum(t.linear(t.constant(x), t.constant(w), v));
    });
  }

  // broadcast add / channel-wise mul / concat / slice
  {
    Tensor a = rand_t(rng, {1, 3, 4, 6});
    comp("op.add.spatial", rand_t(rng, {1, 1, 4, 6}), [a](Tape& t, Var v) {
      return t.sum(t.mul(t.add(t.constant(a), v), t.constant(a)));
    });
    comp("op.add.channel", rand_t(rng, {1, 3, 1, 1}), [a](Tape& t, Var v) {
      return t.sum(t.mul(t.add(t.constant(a), v), t.constant(a)));
    });
    comp("op.add.lhs", a, [b = rand_t(rng, {1, 1, 4, 6})](Tape& t, Var v) {
      return t.sum(t.mul(t.add(v, t.constant(b)), v));
    });
  }
  {
    Tensor h = rand_t(rng, {1, 4, 3, 5});
    Tensor al = rand_t(rng, {1, 4, 1, 1}, 0.1, 0.9);
    comp("op.mul_channelwise.feature", h, [al](Tape& t, Var v) {
      return t.sum(t.mul(t.mul_channelwise(v, t.constant(al)), v));
    });
    comp("op.mul_channelwise.gate", al, [h](Tape& t, Var v) {
      return t.sum(t.mul(t.mul_channelwise(t.constant(h), v), t.constant(h)));
    });
  }
  {
    Tensor a = rand_t(rng, {1, 2, 3, 4});
    Tensor b = rand_t(rng, {1, 3, 3, 4});
    comp("op.concat.lhs", a, [b](Tape& t, Var v) {
      Var c = t.concat_channels(v, t.constant(b));
      return t.sum(t.mul(c, c));
    });
    comp("op.concat.rhs", b, [a](Tape& t, Var v) {
      Var c = t.concat_channels(t.constant(a), v);
      return t.sum(t.mul(c, c));
    });
  }
  comp("op.slice", rand_t(rng, {1, 4, 3, 4}), [](Tape& t, Var v) {
    Var s = t.slice_channels(v, 1, 3);
    return t.sum(t.mul(s, s));
  });

  // composite layers
  {
    auto layer = std::make_shared<ConvNormAct>("gc.cna", 3, 4, 3, 1, 1, 1, Act::sigmoid, rng);
    comp("layer.conv_norm_act", rand_t(rng, {1, 3, 6, 8}),
         [layer](Tape& t, Var v) { return t.sum(layer->forward(t, v, true)); });
  }
  {
    auto block = std::make_shared<ResidualBasicBlock>("gc.res", 4, 4, 1, rng);
    // Sigmoid keeps the probe clear of the final relu kink.
    comp_composite("layer.residual_block", rand_t(rng, {1, 4, 6, 8}),
         [block](Tape& t, Var v) { return t.sum(t.sigmoid(block->forward(t, v, true))); });
  }
  {
    auto step = std::make_shared<AggregationStep>("gc.agg", 6, 4, rng);
    Tensor coarse = rand_t(rng, {1, 6, 2, 3});
    Tensor fine = rand_t(rng, {1, 4, 4, 6});
    comp_composite("layer.aggregation_step.coarse", coarse, [step, fine](Tape& t, Var v) {
      return t.sum(step->forward(t, v, t.constant(fine), true));
    });
    comp_composite("layer.aggregation_step.fine", fine, [step, coarse](Tape& t, Var v) {
      return t.sum(step->forward(t, t.constant(coarse), v, true));
    });
  }
  {
    auto fuse = std::make_shared<FusionModule>(4, 3, true, rng);
    Tensor agg = rand_t(rng, {1, 4, 3, 4});
    Tensor detail = rand_t(rng, {1, 3, 6, 8});
    comp("layer.fusion.aggregated", agg, [fuse, detail](Tape& t, Var v) {
      return t.sum(fuse->forward(t, v, t.constant(detail), true));
    });
    comp("layer.fusion.detail", detail, [fuse, agg](Tape& t, Var v) {
      return t.sum(fuse->forward(t, t.constant(agg), v, true));
    });
  }
  {
    auto head = std::make_shared<ChannelAttentionHead>("gc.ch", 8, 5, 6, rng);
    comp_composite("layer.attention.channel", rand_t(rng, {1, 8, 3, 4}),
         [head](Tape& t, Var v) { return t.sum(head->forward(t, v)); });
  }
  {
    auto head = std::make_shared<SpatialAttentionHead>("gc.sp", 4, 1, 2, rng);
    comp("layer.attention.spatial", rand_t(rng, {1, 4, 6, 8}),
         [head](Tape& t, Var v) { return t.sum(head->forward(t, v)); });
  }
  {
    auto head = std::make_shared<TaskHead>("gc.head", 4, 3, 2, rng);
    comp_composite("layer.task_head", rand_t(rng, {1, 4, 3, 4}),
         [head](Tape& t, Var v) { return t.sum(t.sigmoid(head->forward(t, v))); });
  }

  // losses
  {
    Tensor labels = Tensor::zeros({1, 1, 4, 6});
    for (int64_t i = 0; i < labels.numel(); ++i)
      labels[i] = rng.uniform() < 0.15 ? 255.0 : static_cast<double>(rng.uniform_int(0, 4));
    comp("loss.seg_cross_entropy", rand_t(rng, {1, 5, 4, 6}, -2.0, 2.0),
         [labels](Tape& t, Var v) { return t.softmax_cross_entropy(v, labels, 255); });
  }
  {
    Tensor pred = rand_t(rng, {1, 1, 4, 6}, -2.0, 2.0);
    Tensor target = pred;
    Tensor residual = rand_residual(rng, pred.shape());
    for (int64_t i = 0; i < target.numel(); ++i) target[i] = pred[i] - residual[i];
    Tensor mask = rand_mask(rng, {1, 1, 4, 6});
    comp("loss.smooth_l1", pred,
         [target, mask](Tape& t, Var v) { return t.smooth_l1(v, target, mask); });
    comp("loss.l1", pred, [target, mask](Tape& t, Var v) { return t.l1_masked(v, target, mask); });
  }
  {
    Tensor target = rand_t(rng, {1, 3, 4, 5}, 0.0, 0.95);
    target[3] = 1.0;
    target[27] = 1.0;
    comp("loss.focal_heatmap", rand_t(rng, {1, 3, 4, 5}, -2.0, 2.0),
         [target](Tape& t, Var v) { return t.focal_heatmap(v, target); });
  }
  {
    Tensor bins = Tensor::zeros({1, 1, 3, 4});
    for (int64_t i = 0; i < bins.numel(); ++i) bins[i] = static_cast<double>(rng.uniform_int(0, 5));
    Tensor mask = rand_mask(rng, {1, 1, 3, 4});
    comp("loss.bin_cross_entropy", rand_t(rng, {1, 6, 3, 4}, -2.0, 2.0),
         [bins, mask](Tape& t, Var v) { return t.bin_cross_entropy(v, bins, mask); });

    Tensor pred = rand_t(rng, {1, 6, 3, 4}, -2.0, 2.0);
    Tensor target = Tensor::zeros({1, 1, 3, 4});
    for (int64_t i = 0; i < target.numel(); ++i) {
      int64_t b = static_cast<int64_t>(bins[i]);
      double d = rng.uniform() < 0.5 ? rng.uniform(0.1, 0.9) : rng.uniform(-0.9, -0.1);
      target[i] = pred[(b * 3 * 4) + i] - d;
    }
    comp("loss.select_channel_l1", pred, [bins, target, mask](Tape& t, Var v) {
      return t.select_channel_l1(v, bins, target, mask);
    });
  }
  comp("loss.weighted_sum", rand_t(rng, {2, 3}, -2.0, 2.0), [](Tape& t, Var v) {
    Var a = t.sum(t.sigmoid(v));
    Var b = t.scale(a, 0.31);
    Var c = t.sum(t.mul(v, v));
    return total_loss(t, a, b, c, LossWeights{1.0, 100.0, 1.0});
  });

  return out;
}

namespace {

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
}

// Central differences first; where they disagree with the tape, fall back
// to the one-sided slopes. A step that crosses a relu kink averages the two
// branch slopes, but the branch the point actually sits on is still
// measured by the difference taken on its own side, so the gradient at the
// point gets verified either way.
GradcheckEntry fallback_check(const GradcheckComponent& c) {
  Tape tape;
  Var vx = tape.leaf(c.probe, true);
  Var out = c.fn(tape, vx);
  if (tape.value(out).numel() != 1)
    throw ShapeError("gradcheck: closure output must be scalar");
  tape.backward(out);
  Tensor analytic = tape.grad(vx);

  GradcheckEntry e{c.name, 0.0, c.tolerance, false, 0, 0};
  Tensor probe = c.probe;
  const double f0 = eval_scalar(c.fn, probe);
  for (int64_t i = 0; i < probe.numel(); ++i) {
    double keep = probe[i];
    probe[i] = keep + c.eps;
    double f_plus = eval_scalar(c.fn, probe);
    probe[i] = keep - c.eps;
    double f_minus = eval_scalar(c.fn, probe);
    probe[i] = keep;
    double central = (f_plus - f_minus) / (2.0 * c.eps);
    double err = rel_err(analytic[i], central);
    if (err >= c.tolerance) {
      double fwd = (f_plus - f0) / c.eps;
      double bwd = (f0 - f_minus) / c.eps;
      err = std::min(rel_err(analytic[i], fwd), rel_err(analytic[i], bwd));
      ++e.coords_one_sided;
    }
    e.max_rel_err = std::max(e.max_rel_err, err);
    ++e.coords_checked;
  }
  e.pass = e.coords_checked > 0 && e.max_rel_err < c.tolerance;
  return e;
}

void print_entry(std::ostringstream& os, const GradcheckEntry& e) {
  os << (e.pass ? "[pass] " : "[FAIL] ") << e.name;
  for (size_t i = e.name.size(); i < 34; ++i) os << ' ';
  char num[128];
  std::snprintf(num, sizeof(num), " max_rel_err %.3e (tol %.0e)", e.max_rel_err, e.tolerance);
  os << num;
  if (e.coords_one_sided > 0)
    os << "  [" << e.coords_one_sided << " kink-adjacent coordinate(s) verified one-sided]";
  os << "\n";
}

}  // namespace

GradcheckReport run_gradcheck_components(const std::vector<GradcheckComponent>& components) {
  GradcheckReport rep;
  std::ostringstream os;
  for (const GradcheckComponent& c : components) {
    GradcheckEntry e;
    if (c.kink_fallback) {
      e = fallback_check(c);
    } else {
      GradCheckReport r = finite_diff_check(c.fn, c.probe, c.eps);
      e = {c.name, r.max_rel_err, c.tolerance, r.max_rel_err < c.tolerance, r.coords_checked, 0};
    }
    rep.all_pass = rep.all_pass && e.pass;
    print_entry(os, e);
    rep.entries.push_back(std::move(e));
  }
  rep.text = os.str();
  return rep;
}

GradcheckReport run_gradcheck_end_to_end(const ModelConfig& cfg, uint64_t seed, int64_t input_h,
                                         int64_t input_w, int samples_per_group,
                                         double loss_delta, double tolerance) {
  MultiTaskModel model(cfg, seed);
  SyntheticSample sample = generate_synthetic(seed, input_h, input_w, 1, cfg);

  auto loss_value = [&]() {
    Tape tape;
    Var in = tape.leaf(sample.image, false);
    ForwardMaps maps = model.forward(tape, in, true);
    ModelLosses losses = model.loss(tape, maps, sample.targets);
    return tape.value(losses.total)[0];
  };

  model.zero_grads();
  {
    Tape tape;
    Var in = tape.leaf(sample.image, false);
    ForwardMaps maps = model.forward(tape, in, true);
    ModelLosses losses = model.loss(tape, maps, sample.targets);
    tape.backward(losses.total);
  }

  // Group parameters by their top-level architecture component.
  std::map<std::string, std::vector<Parameter*>> groups;
  for (Parameter* p : model.parameters()) {
    std::string group = p->name.substr(0, p->name.find('.'));
    groups[group].push_back(p);
  }

  RngStream rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double f_base = loss_value();
  GradcheckReport rep;
  std::ostringstream os;
  for (auto& [group, params] : groups) {
    // One probe per sampled parameter tensor, taken along its own gradient
    // direction. Per-coordinate probes drown in forward round-off here: the
    // loss is O(1e3) while a single early-layer coordinate moves it by
    // O(eps * 1e-2). The directional derivative along g/|g| equals |g|,
    // which keeps the signal far above the round-off floor and still pins
    // the gradient (any consistent error in g shifts |g|).
    std::vector<Parameter*> picks;
    {
      std::vector<Parameter*> pool = params;
      while (!pool.empty() && static_cast<int>(picks.size()) < samples_per_group) {
        size_t at = static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1));
        picks.push_back(pool[at]);
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(at));
      }
    }

    GradcheckEntry e{"e2e." + group, 0.0, tolerance, true, 0, 0};
    for (Parameter* p : picks) {
      double norm = 0.0;
      for (int64_t i = 0; i < p->numel(); ++i) norm += p->grad[i] * p->grad[i];
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;  // unreachable parameter, nothing to verify

      // Normalization layers put near-singular curvature pockets into the
      // landscape (gradients of 1e6+ that hold only within a ~1e-10 ball),
      // so the step is sized to move the loss by a fixed loss_delta rather
      // than to a fixed parameter distance.
      const double analytic = norm;  // d/dt f(theta + t g/|g|) at t = 0
      Tensor keep = p->value;
      auto nudge = [&](double t) {
        for (int64_t i = 0; i < p->numel(); ++i)
          p->value[i] = keep[i] + t * (p->grad[i] / norm);
      };
      bool used_one_sided = false;
      auto probe = [&](double step) {
        nudge(step);
        double f_plus = loss_value();
        nudge(-step);
        double f_minus = loss_value();
        p->value = keep;
        double central = (f_plus - f_minus) / (2.0 * step);
        double err = std::abs(analytic - central) / std::max(1e-8, std::abs(central));
        if (err >= tolerance) {
          // One-sided fallback for steps crossing a downstream relu kink.
          double fwd = (f_plus - f_base) / step;
          double bwd = (f_base - f_minus) / step;
          err = std::min(std::abs(analytic - fwd) / std::max(1e-8, std::abs(fwd)),
                         std::abs(analytic - bwd) / std::max(1e-8, std::abs(bwd)));
          used_one_sided = true;
        }
        return err;
      };
      const double step = std::clamp(loss_delta / norm, 1e-12, 1e-4);
      double err = probe(step);
      // Marginal truncation gets one refinement before it counts as a
      // failure.
      if (err >= tolerance) err = std::min(err, probe(step / 16.0));
      if (used_one_sided) ++e.coords_one_sided;
      e.max_rel_err = std::max(e.max_rel_err, err);
      ++e.coords_checked;
    }
    e.pass = e.coords_checked > 0 && e.max_rel_err < tolerance;
    rep.all_pass = rep.all_pass && e.pass;
    print_entry(os, e);
    rep.entries.push_back(std::move(e));
  }
  rep.text = os.str();
  return rep;
}

GradcheckReport run_gradcheck(const ModelConfig& cfg, uint64_t seed, bool per_layer_only) {
  GradcheckReport rep = run_gradcheck_components(standard_gradcheck_components(seed));
  if (!per_layer_only) {
    GradcheckReport e2e = run_gradcheck_end_to_end(cfg, seed, 64, 128, 5, 1e-3, 1e-3);
    rep.all_pass = rep.all_pass && e2e.all_pass;
    rep.entries.insert(rep.entries.end(), e2e.entries.begin(), e2e.entries.end());
    rep.text += e2e.text;
  }
  return rep;
}

}  // namespace mtnet
