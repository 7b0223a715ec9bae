#include "mtnet/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace mtnet {

namespace {

std::atomic<uint32_t> g_tape_counter{1};

// Clamped into the open unit interval at the representable boundaries, so
// the (0,1) range contract holds for every finite input.
double stable_sigmoid(double x) {
  double s;
  if (x >= 0.0) {
    double e = std::exp(-x);
    s = 1.0 / (1.0 + e);
  } else {
    double e = std::exp(x);
    s = e / (1.0 + e);
  }
  if (s >= 1.0) return 0x1.fffffffffffffp-1;
  if (s <= 0.0) return 0x1p-1074;
  return s;
}

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  if (x > 36.0) return x;
  if (x < -36.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

void require_4d(const Tensor& t, const char* who) {
  if (t.rank() != 4) throw ShapeError(std::string(who) + ": expected 4-D tensor, got shape " +
                                      t.shape_string());
}

// b broadcastable onto a: equal rank, each extent equal or 1.
void require_broadcastable(const Tensor& a, const Tensor& b, const char* who) {
  if (a.rank() != b.rank())
    throw ShapeError(std::string(who) + ": rank mismatch between " + a.shape_string() + " and " +
                     b.shape_string());
  for (int i = 0; i < a.rank(); ++i) {
    if (b.extent(i) != a.extent(i) && b.extent(i) != 1)
      throw ShapeError(std::string(who) + ": shape " + b.shape_string() +
                       " does not broadcast onto " + a.shape_string());
  }
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 0);
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// Visits every flat index of `a` together with the flat index into the
// broadcast operand. Deterministic row-major order.
template <typename Fn>
void for_each_broadcast(const Shape& a, const Shape& b, Fn&& fn) {
  const int rank = static_cast<int>(a.size());
  if (rank == 0) {
    fn(int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> bstride = row_major_strides(b);
  for (int i = 0; i < rank; ++i)
    if (b[static_cast<size_t>(i)] == 1) bstride[static_cast<size_t>(i)] = 0;
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  int64_t n = shape_numel(a);
  int64_t bi = 0;
  for (int64_t ai = 0; ai < n; ++ai) {
    fn(ai, bi);
    for (int d = rank - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      bi += bstride[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < a[static_cast<size_t>(d)]) break;
      bi -= bstride[static_cast<size_t>(d)] * a[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

struct ResizeTaps {
  std::vector<int64_t> lo, hi;
  std::vector<double> frac;
};

// Half-pixel source coordinates with edge replication.
ResizeTaps make_taps(int64_t out_extent, int64_t in_extent, int scale) {
  ResizeTaps t;
  t.lo.resize(static_cast<size_t>(out_extent));
  t.hi.resize(static_cast<size_t>(out_extent));
  t.frac.resize(static_cast<size_t>(out_extent));
  for (int64_t o = 0; o < out_extent; ++o) {
    double src = (static_cast<double>(o) + 0.5) / scale - 0.5;
    double f = std::floor(src);
    int64_t i0 = static_cast<int64_t>(f);
    double frac = src - f;
    int64_t lo = std::clamp<int64_t>(i0, 0, in_extent - 1);
    int64_t hi = std::clamp<int64_t>(i0 + 1, 0, in_extent - 1);
    t.lo[static_cast<size_t>(o)] = lo;
    t.hi[static_cast<size_t>(o)] = hi;
    t.frac[static_cast<size_t>(o)] = frac;
  }
  return t;
}

}  // namespace

int64_t conv_out_extent(int64_t in, int kernel, int stride, int dilation, int padding) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

Tape::Tape() : tape_id_(g_tape_counter.fetch_add(1)) {}

Var Tape::push(Tensor t, bool needs) {
  values_.push_back(std::move(t));
  extern_.push_back(nullptr);
  param_of_.push_back(nullptr);
  needs_grad_.push_back(needs ? 1 : 0);
  return Var{static_cast<int32_t>(values_.size() - 1), tape_id_};
}

void Tape::record(int32_t out, std::function<void(Tape&)> back) {
  nodes_.push_back(Node{out, std::move(back)});
}

void Tape::check(Var v, const char* who) const {
  if (v.tape != tape_id_ || v.id < 0 || v.id >= static_cast<int32_t>(values_.size()))
    throw ValueError(std::string(who) + ": var was not recorded on this tape");
}

Tensor& Tape::gslot(int32_t id) {
  size_t i = static_cast<size_t>(id);
  if (Parameter* p = param_of_[i]) {
    p->ensure_grad();
    return p->grad;
  }
  if (!has_grad_[i]) {
    grads_[i] = Tensor::zeros(val(id).shape());
    has_grad_[i] = 1;
  }
  return grads_[i];
}

Var Tape::leaf(Tensor value, bool requires_grad) { return push(std::move(value), requires_grad); }

Var Tape::param(Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return Var{it->second, tape_id_};
  Var v = push(Tensor(), true);
  extern_[static_cast<size_t>(v.id)] = &p.value;
  param_of_[static_cast<size_t>(v.id)] = &p;
  bound_.emplace(&p, v.id);
  bindings_.emplace_back(&p, v);
  return v;
}

const Tensor& Tape::value(Var v) const {
  check(v, "value");
  return val(v.id);
}

bool Tape::requires_grad(Var v) const {
  check(v, "requires_grad");
  return needs(v.id);
}

const Tensor& Tape::grad(Var v) const {
  check(v, "grad");
  if (!backward_done_) throw ValueError("grad: backward() has not been run");
  size_t i = static_cast<size_t>(v.id);
  if (Parameter* p = param_of_[i]) return p->grad;
  if (!has_grad_[i]) {
    // Untouched by the reverse pass: zero gradient of matching shape.
    const_cast<Tape*>(this)->gslot(v.id);
  }
  return grads_[i];
}

void Tape::backward(Var loss) {
  check(loss, "backward");
  if (value(loss).numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + value(loss).shape_string());
  grads_.assign(values_.size(), Tensor());
  has_grad_.assign(values_.size(), 0);
  backward_done_ = true;  // gslot is usable from here on
  gslot(loss.id)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!has_grad_[static_cast<size_t>(it->out)]) continue;
    it->back(*this);
  }
  // Parameters unreachable from the loss still get zero grads of the right
  // shape, so every bound parameter is safe to feed to the optimizer.
  for (auto& b : bindings_) b.first->ensure_grad();
}

// ---------------------------------------------------------------- elementwise

Var Tape::relu(Var x) {
  check(x, "relu");
  const Tensor& xv = val(x.id);
  Tensor out = Tensor::zeros(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id](Tape& t) {
      const Tensor& g = t.gslot(yi);
      const Tensor& xv = t.val(xi);
      Tensor& gx = t.gslot(xi);
      // Subgradient 0 at the kink.
      for (int64_t i = 0; i < g.numel(); ++i)
        if (xv[i] > 0.0) gx[i] += g[i];
    });
  }
  return y;
}

Var Tape::sigmoid(Var x) {
  check(x, "sigmoid");
  const Tensor& xv = val(x.id);
  Tensor out = Tensor::zeros(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = stable_sigmoid(xv[i]);
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id](Tape& t) {
      const Tensor& g = t.gslot(yi);
      const Tensor& s = t.val(yi);
      Tensor& gx = t.gslot(xi);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
    });
  }
  return y;
}

Var Tape::add(Var a, Var b) {
  check(a, "add");
  check(b, "add");
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  require_broadcastable(av, bv, "add");
  Tensor out = Tensor::zeros(av.shape());
  for_each_broadcast(av.shape(), bv.shape(),
                     [&](int64_t ai, int64_t bi) { out[ai] = av[ai] + bv[bi]; });
  bool ng = needs(a.id) || needs(b.id);
  Var y = push(std::move(out), ng);
  if (ng) {
    record(y.id, [ai = a.id, bi = b.id, yi = y.id](Tape& t) {
      const Tensor& g = t.gslot(yi);
      if (t.needs(ai)) {
        Tensor& ga = t.gslot(ai);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (t.needs(bi)) {
        Tensor& gb = t.gslot(bi);
        for_each_broadcast(t.val(ai).shape(), t.val(bi).shape(),
                           [&](int64_t i, int64_t j) { gb[j] += g[i]; });
      }
    });
  }
  return y;
}

Var Tape::mul(Var a, Var b) {
  check(a, "mul");
  check(b, "mul");
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  require_broadcastable(av, bv, "mul");
  Tensor out = Tensor::zeros(av.shape());
  for_each_broadcast(av.shape(), bv.shape(),
                     [&](int64_t ai, int64_t bi) { out[ai] = av[ai] * bv[bi]; });
  bool ng = needs(a.id) || needs(b.id);
  Var y = push(std::move(out), ng);
  if (ng) {
    record(y.id, [ai = a.id, bi = b.id, yi = y.id](Tape& t) {
      const Tensor& g = t.gslot(yi);
      const Tensor& av = t.val(ai);
      const Tensor& bv = t.val(bi);
      if (t.needs(ai)) {
        Tensor& ga = t.gslot(ai);
        for_each_broadcast(av.shape(), bv.shape(),
                           [&](int64_t i, int64_t j) { ga[i] += g[i] * bv[j]; });
      }
      if (t.needs(bi)) {
        Tensor& gb = t.gslot(bi);
        for_each_broadcast(av.shape(), bv.shape(),
                           [&](int64_t i, int64_t j) { gb[j] += g[i] * av[i]; });
      }
    });
  }
  return y;
}

Var Tape::mul_channelwise(Var h, Var alpha) {
  check(h, "mul_channelwise");
  check(alpha, "mul_channelwise");
  const Tensor& hv = val(h.id);
  const Tensor& av = val(alpha.id);
  require_4d(hv, "mul_channelwise");
  require_4d(av, "mul_channelwise");
  if (av.extent(0) != hv.extent(0) || av.extent(1) != hv.extent(1) || av.extent(2) != 1 ||
      av.extent(3) != 1)
    throw ShapeError("mul_channelwise: attention shape " + av.shape_string() +
                     " does not match feature shape " + hv.shape_string());
  return mul(h, alpha);
}

Var Tape::scale(Var x, double c) {
  check(x, "scale");
  const Tensor& xv = val(x.id);
  Tensor out = Tensor::zeros(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = c * xv[i];
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id, c](Tape& t) {
      const Tensor& g = t.gslot(yi);
      Tensor& gx = t.gslot(xi);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += c * g[i];
    });
  }
  return y;
}

Var Tape::sum(Var x) {
  check(x, "sum");
  const Tensor& xv = val(x.id);
  double acc = 0.0;
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  Var y = push(Tensor::scalar(acc), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id](Tape& t) {
      double g = t.gslot(yi)[0];
      Tensor& gx = t.gslot(xi);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
  }
  return y;
}

Var Tape::reshape(Var x, Shape shape) {
  check(x, "reshape");
  const Tensor& xv = val(x.id);
  if (shape_numel(shape) != xv.numel())
    throw ShapeError("reshape: cannot view " + xv.shape_string() + " as " + shape_str(shape));
  Tensor out = Tensor::zeros(shape);
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i];
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id](Tape& t) {
      const Tensor& g = t.gslot(yi);
      Tensor& gx = t.gslot(xi);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------- structure

Var Tape::concat_channels(Var a, Var b) {
  check(a, "concat_channels");
  check(b, "concat_channels");
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  require_4d(av, "concat_channels");
  require_4d(bv, "concat_channels");
  if (av.extent(0) != bv.extent(0) || av.extent(2) != bv.extent(2) ||
      av.extent(3) != bv.extent(3))
    throw ShapeError("concat_channels: spatial/batch mismatch between " + av.shape_string() +
                     " and " + bv.shape_string());
  int64_t B = av.extent(0), Ca = av.extent(1), Cb = bv.extent(1);
  int64_t H = av.extent(2), W = av.extent(3), plane = H * W;
  Tensor out = Tensor::zeros({B, Ca + Cb, H, W});
  for (int64_t n = 0; n < B; ++n) {
    double* dst = out.data() + n * (Ca + Cb) * plane;
    const double* pa = av.data() + n * Ca * plane;
    const double* pb = bv.data() + n * Cb * plane;
    std::copy(pa, pa + Ca * plane, dst);
    std::copy(pb, pb + Cb * plane, dst + Ca * plane);
  }
  bool ng = needs(a.id) || needs(b.id);
  Var y = push(std::move(out), ng);
  if (ng) {
    record(y.id, [ai = a.id, bi = b.id, yi = y.id, B, Ca, Cb, plane](Tape& t) {
      const Tensor& g = t.gslot(yi);
      for (int64_t n = 0; n < B; ++n) {
        const double* src = g.data() + n * (Ca + Cb) * plane;
        if (t.needs(ai)) {
          Tensor& ga = t.gslot(ai);
          double* pa = ga.data() + n * Ca * plane;
          for (int64_t i = 0; i < Ca * plane; ++i) pa[i] += src[i];
        }
        if (t.needs(bi)) {
          Tensor& gb = t.gslot(bi);
          double* pb = gb.data() + n * Cb * plane;
          for (int64_t i = 0; i < Cb * plane; ++i) pb[i] += src[Ca * plane + i];
        }
      }
    });
  }
  return y;
}

Var Tape::slice_channels(Var x, int64_t begin, int64_t end) {
  check(x, "slice_channels");
  const Tensor& xv = val(x.id);
  require_4d(xv, "slice_channels");
  int64_t C = xv.extent(1);
  if (begin < 0 || end > C || begin >= end)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + xv.shape_string());
  int64_t B = xv.extent(0), H = xv.extent(2), W = xv.extent(3), plane = H * W;
  int64_t Cs = end - begin;
  Tensor out = Tensor::zeros({B, Cs, H, W});
  for (int64_t n = 0; n < B; ++n) {
    const double* src = xv.data() + (n * C + begin) * plane;
    double* dst = out.data() + n * Cs * plane;
    std::copy(src, src + Cs * plane, dst);
  }
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id, begin, B, C, Cs, plane](Tape& t) {
      const Tensor& g = t.gslot(yi);
      Tensor& gx = t.gslot(xi);
      for (int64_t n = 0; n < B; ++n) {
        const double* src = g.data() + n * Cs * plane;
        double* dst = gx.data() + (n * C + begin) * plane;
        for (int64_t i = 0; i < Cs * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- conv / linear

namespace {

// Deep layers run on tiny planes (down to 1x2) where per-tap loop overhead
// swamps the arithmetic; those take a per-output-position path with the
// channel loop innermost. Both paths use a fixed loop nest, and the path
// choice depends only on shapes, so outputs stay bit-exact across reruns.
constexpr int64_t kSmallPlane = 32;
constexpr int64_t kSmallPlaneBackward = 8;

void conv2d_forward_small(const Tensor& in, const Tensor& w, const ConvSpec& sp, Tensor& out) {
  const int64_t B = in.extent(0), Cin = in.extent(1), H = in.extent(2), W = in.extent(3);
  const int64_t Cout = w.extent(0), K = w.extent(2);
  const int64_t OH = out.extent(2), OW = out.extent(3);
  const int64_t s = sp.stride, d = sp.dilation, p = sp.padding;
  const int64_t K2 = K * K, plane = H * W;
  for (int64_t b = 0; b < B; ++b) {
    const double* ibase = in.data() + b * Cin * plane;
    for (int64_t co = 0; co < Cout; ++co) {
      const double* wbase = w.data() + co * Cin * K2;
      double* orow = out.data() + (b * Cout + co) * OH * OW;
      for (int64_t oh = 0; oh < OH; ++oh) {
        for (int64_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (int64_t kh = 0; kh < K; ++kh) {
            const int64_t ih = oh * s + kh * d - p;
            if (ih < 0 || ih >= H) continue;
            for (int64_t kw = 0; kw < K; ++kw) {
              const int64_t iw = ow * s + kw * d - p;
              if (iw < 0 || iw >= W) continue;
              const double* ip = ibase + ih * W + iw;
              const double* wp = wbase + kh * K + kw;
              for (int64_t ci = 0; ci < Cin; ++ci) acc += wp[ci * K2] * ip[ci * plane];
            }
          }
          orow[oh * OW + ow] = acc;
        }
      }
    }
  }
}

// out[b,co] += sum_ci,kh,kw w[co,ci,kh,kw] * in[b,ci,...]; loop nest fixed
// so accumulation order (and therefore the output bits) never varies. The
// stride-1 inner loops are written without the runtime stride so they
// vectorize.
void conv2d_forward_kernel(const Tensor& in, const Tensor& w, const ConvSpec& sp, Tensor& out) {
  const int64_t B = in.extent(0), Cin = in.extent(1), H = in.extent(2), W = in.extent(3);
  const int64_t Cout = w.extent(0), K = w.extent(2);
  const int64_t OH = out.extent(2), OW = out.extent(3);
  if (OH * OW <= kSmallPlane) {
    conv2d_forward_small(in, w, sp, out);
    return;
  }
  const int64_t s = sp.stride, d = sp.dilation, p = sp.padding;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Cout; ++co) {
      double* oplane = out.data() + (b * Cout + co) * OH * OW;
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const double* iplane = in.data() + (b * Cin + ci) * H * W;
        const double* wk = w.data() + (co * Cin + ci) * K * K;
        for (int64_t kh = 0; kh < K; ++kh) {
          for (int64_t kw = 0; kw < K; ++kw) {
            const double wv = wk[kh * K + kw];
            const int64_t offh = kh * d - p, offw = kw * d - p;
            const int64_t oh_lo = offh >= 0 ? 0 : (-offh + s - 1) / s;
            const int64_t oh_hi = std::min(OH, offh > H - 1 ? int64_t{0} : (H - 1 - offh) / s + 1);
            const int64_t ow_lo = offw >= 0 ? 0 : (-offw + s - 1) / s;
            const int64_t ow_hi = std::min(OW, offw > W - 1 ? int64_t{0} : (W - 1 - offw) / s + 1);
            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
              const double* irow = iplane + (oh * s + offh) * W + offw;
              double* orow = oplane + oh * OW;
              if (s == 1) {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow];
              } else {
                for (int64_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow * s];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_small(const Tensor& in, const Tensor& w, const ConvSpec& sp,
                           const Tensor& gout, Tensor* gin, Tensor* gw) {
  const int64_t B = in.extent(0), Cin = in.extent(1), H = in.extent(2), W = in.extent(3);
  const int64_t Cout = w.extent(0), K = w.extent(2);
  const int64_t OH = gout.extent(2), OW = gout.extent(3);
  const int64_t s = sp.stride, d = sp.dilation, p = sp.padding;
  const int64_t K2 = K * K, plane = H * W;
  for (int64_t b = 0; b < B; ++b) {
    const double* ibase = in.data() + b * Cin * plane;
    double* gibase = gin ? gin->data() + b * Cin * plane : nullptr;
    for (int64_t oh = 0; oh < OH; ++oh) {
      for (int64_t ow = 0; ow < OW; ++ow) {
        for (int64_t kh = 0; kh < K; ++kh) {
          const int64_t ih = oh * s + kh * d - p;
          if (ih < 0 || ih >= H) continue;
          for (int64_t kw = 0; kw < K; ++kw) {
            const int64_t iw = ow * s + kw * d - p;
            if (iw < 0 || iw >= W) continue;
            const int64_t tap = kh * K + kw;
            const int64_t cell = ih * W + iw;
            for (int64_t co = 0; co < Cout; ++co) {
              const double gv = gout[(b * Cout + co) * OH * OW + oh * OW + ow];
              const double* wp = w.data() + co * Cin * K2 + tap;
              if (gin && gw) {
                double* gwp = gw->data() + co * Cin * K2 + tap;
                for (int64_t ci = 0; ci < Cin; ++ci) {
                  gibase[ci * plane + cell] += wp[ci * K2] * gv;
                  gwp[ci * K2] += ibase[ci * plane + cell] * gv;
                }
              } else if (gin) {
                for (int64_t ci = 0; ci < Cin; ++ci)
                  gibase[ci * plane + cell] += wp[ci * K2] * gv;
              } else if (gw) {
                double* gwp = gw->data() + co * Cin * K2 + tap;
                for (int64_t ci = 0; ci < Cin; ++ci)
                  gwp[ci * K2] += ibase[ci * plane + cell] * gv;
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_kernel(const Tensor& in, const Tensor& w, const ConvSpec& sp,
                            const Tensor& gout, Tensor* gin, Tensor* gw) {
  const int64_t B = in.extent(0), Cin = in.extent(1), H = in.extent(2), W = in.extent(3);
  const int64_t Cout = w.extent(0), K = w.extent(2);
  const int64_t OH = gout.extent(2), OW = gout.extent(3);
  if (OH * OW <= kSmallPlaneBackward) {
    conv2d_backward_small(in, w, sp, gout, gin, gw);
    return;
  }
  const int64_t s = sp.stride, d = sp.dilation, p = sp.padding;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Cout; ++co) {
      const double* gplane = gout.data() + (b * Cout + co) * OH * OW;
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const double* iplane = in.data() + (b * Cin + ci) * H * W;
        const double* wk = w.data() + (co * Cin + ci) * K * K;
        double* giplane = gin ? gin->data() + (b * Cin + ci) * H * W : nullptr;
        double* gwk = gw ? gw->data() + (co * Cin + ci) * K * K : nullptr;
        for (int64_t kh = 0; kh < K; ++kh) {
          for (int64_t kw = 0; kw < K; ++kw) {
            const int64_t offh = kh * d - p, offw = kw * d - p;
            const int64_t oh_lo = offh >= 0 ? 0 : (-offh + s - 1) / s;
            const int64_t oh_hi = std::min(OH, offh > H - 1 ? int64_t{0} : (H - 1 - offh) / s + 1);
            const int64_t ow_lo = offw >= 0 ? 0 : (-offw + s - 1) / s;
            const int64_t ow_hi = std::min(OW, offw > W - 1 ? int64_t{0} : (W - 1 - offw) / s + 1);
            if (gin) {
              const double wv = wk[kh * K + kw];
              for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                double* girow = giplane + (oh * s + offh) * W + offw;
                const double* grow = gplane + oh * OW;
                if (s == 1) {
                  for (int64_t ow = ow_lo; ow < ow_hi; ++ow) girow[ow] += wv * grow[ow];
                } else {
                  for (int64_t ow = ow_lo; ow < ow_hi; ++ow) girow[ow * s] += wv * grow[ow];
                }
              }
            }
            if (gw) {
              // Four-lane reduction, fixed order; the tail keeps lane 0.
              double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
              for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                const double* irow = iplane + (oh * s + offh) * W + offw;
                const double* grow = gplane + oh * OW;
                if (s == 1) {
                  int64_t ow = ow_lo;
                  for (; ow + 4 <= ow_hi; ow += 4) {
                    acc0 += irow[ow] * grow[ow];
                    acc1 += irow[ow + 1] * grow[ow + 1];
                    acc2 += irow[ow + 2] * grow[ow + 2];
                    acc3 += irow[ow + 3] * grow[ow + 3];
                  }
                  for (; ow < ow_hi; ++ow) acc0 += irow[ow] * grow[ow];
                } else {
                  for (int64_t ow = ow_lo; ow < ow_hi; ++ow) acc0 += irow[ow * s] * grow[ow];
                }
              }
              gwk[kh * K + kw] += ((acc0 + acc1) + (acc2 + acc3));
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var Tape::conv2d(Var input, Var weight, const ConvSpec& spec) {
  check(input, "conv2d");
  check(weight, "conv2d");
  const Tensor& in = val(input.id);
  const Tensor& w = val(weight.id);
  require_4d(in, "conv2d");
  require_4d(w, "conv2d");
  if (w.extent(2) != w.extent(3)) throw ShapeError("conv2d: kernel must be square, got " +
                                                   w.shape_string());
  if (w.extent(2) % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " +
                                             w.shape_string());
  if (in.extent(1) != w.extent(1))
    throw ShapeError("conv2d: input channels " + in.shape_string() +
                     " do not match weight " + w.shape_string());
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0)
    throw ValueError("conv2d: invalid stride/dilation/padding");
  int64_t OH = conv_out_extent(in.extent(2), static_cast<int>(w.extent(2)), spec.stride,
                               spec.dilation, spec.padding);
  int64_t OW = conv_out_extent(in.extent(3), static_cast<int>(w.extent(3)), spec.stride,
                               spec.dilation, spec.padding);
  if (OH <= 0 || OW <= 0)
    throw ShapeError("conv2d: kernel does not fit input " + in.shape_string());
  Tensor out = Tensor::zeros({in.extent(0), w.extent(0), OH, OW});
  conv2d_forward_kernel(in, w, spec, out);
  bool ng = needs(input.id) || needs(weight.id);
  Var y = push(std::move(out), ng);
  if (ng) {
    record(y.id, [ii = input.id, wi = weight.id, yi = y.id, spec](Tape& t) {
      const Tensor& g = t.gslot(yi);
      const Tensor& in = t.val(ii);
      const Tensor& w = t.val(wi);
      Tensor* gin = t.needs(ii) ? &t.gslot(ii) : nullptr;
      Tensor* gw = t.needs(wi) ? &t.gslot(wi) : nullptr;
      conv2d_backward_kernel(in, w, spec, g, gin, gw);
    });
  }
  return y;
}

Var Tape::linear(Var input, Var weight, Var bias) {
  check(input, "linear");
  check(weight, "linear");
  check(bias, "linear");
  const Tensor& in = val(input.id);
  const Tensor& w = val(weight.id);
  const Tensor& b = val(bias.id);
  if (in.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("linear: expected (B,Cin) x (Cout,Cin) + (Cout), got " + in.shape_string() +
                     ", " + w.shape_string() + ", " + b.shape_string());
  if (in.extent(1) != w.extent(1) || w.extent(0) != b.extent(0))
    throw ShapeError("linear: dimension mismatch between " + in.shape_string() + " and " +
                     w.shape_string());
  int64_t B = in.extent(0), Cin = in.extent(1), Cout = w.extent(0);
  Tensor out = Tensor::zeros({B, Cout});
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t o = 0; o < Cout; ++o) {
      double acc = b[o];
      const double* xr = in.data() + n * Cin;
      const double* wr = w.data() + o * Cin;
      for (int64_t i = 0; i < Cin; ++i) acc += wr[i] * xr[i];
      out.at2(n, o) = acc;
    }
  }
  bool ng = needs(input.id) || needs(weight.id) || needs(bias.id);
  Var y = push(std::move(out), ng);
  if (ng) {
    record(y.id, [ii = input.id, wi = weight.id, bi = bias.id, yi = y.id, B, Cin, Cout](Tape& t) {
      const Tensor& g = t.gslot(yi);
      const Tensor& in = t.val(ii);
      const Tensor& w = t.val(wi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t o = 0; o < Cout; ++o) {
          double go = g.at2(n, o);
          if (t.needs(bi)) t.gslot(bi)[o] += go;
          if (t.needs(wi)) {
            double* gwr = t.gslot(wi).data() + o * Cin;
            const double* xr = in.data() + n * Cin;
            for (int64_t i = 0; i < Cin; ++i) gwr[i] += go * xr[i];
          }
          if (t.needs(ii)) {
            double* gxr = t.gslot(ii).data() + n * Cin;
            const double* wr = w.data() + o * Cin;
            for (int64_t i = 0; i < Cin; ++i) gxr[i] += go * wr[i];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- batch norm

Var Tape::batch_norm(Var input, Var gamma, Var shift, BatchNormState& state, bool training,
                     double momentum, double eps) {
  check(input, "batch_norm");
  check(gamma, "batch_norm");
  check(shift, "batch_norm");
  const Tensor& in = val(input.id);
  require_4d(in, "batch_norm");
  int64_t B = in.extent(0), C = in.extent(1), H = in.extent(2), W = in.extent(3);
  const Tensor& gm = val(gamma.id);
  const Tensor& sh = val(shift.id);
  if (gm.rank() != 1 || gm.extent(0) != C || sh.rank() != 1 || sh.extent(0) != C)
    throw ShapeError("batch_norm: affine shape " + gm.shape_string() + " does not match channels " +
                     in.shape_string());
  int64_t m = B * H * W;
  int64_t plane = H * W;

  Tensor mean, var;
  if (training) {
    mean = Tensor::zeros({C});
    var = Tensor::zeros({C});
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t n = 0; n < B; ++n) {
        const double* p = in.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      mean[c] = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int64_t n = 0; n < B; ++n) {
        const double* p = in.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          double d = p[i] - mean[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / static_cast<double>(m);  // biased, also kept in running stats
    }
    for (int64_t c = 0; c < C; ++c) {
      state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * mean[c];
      state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * var[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor inv_std = Tensor::zeros({C});
  for (int64_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat = Tensor::zeros(in.shape());
  Tensor out = Tensor::zeros(in.shape());
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const double* p = in.data() + (n * C + c) * plane;
      double* xh = xhat.data() + (n * C + c) * plane;
      double* o = out.data() + (n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean[c]) * inv_std[c];
        o[i] = gm[c] * xh[i] + sh[c];
      }
    }
  }
  bool ng = needs(input.id) || needs(gamma.id) || needs(shift.id);
  Var y = push(std::move(out), ng);
  if (ng) {
    record(y.id, [ii = input.id, gi = gamma.id, si = shift.id, yi = y.id, xhat = std::move(xhat),
                  inv_std = std::move(inv_std), training, B, C, plane, m](Tape& t) {
      const Tensor& g = t.gslot(yi);
      const Tensor& gm = t.val(gi);
      for (int64_t c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t n = 0; n < B; ++n) {
          const double* gr = g.data() + (n * C + c) * plane;
          const double* xh = xhat.data() + (n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            sum_g += gr[i];
            sum_gx += gr[i] * xh[i];
          }
        }
        if (t.needs(gi)) t.gslot(gi)[c] += sum_gx;
        if (t.needs(si)) t.gslot(si)[c] += sum_g;
        if (t.needs(ii)) {
          Tensor& gx = t.gslot(ii);
          double k = gm[c] * inv_std[c];
          double mg = sum_g / static_cast<double>(m);
          double mgx = sum_gx / static_cast<double>(m);
          for (int64_t n = 0; n < B; ++n) {
            const double* gr = g.data() + (n * C + c) * plane;
            const double* xh = xhat.data() + (n * C + c) * plane;
            double* gxr = gx.data() + (n * C + c) * plane;
            if (training) {
              for (int64_t i = 0; i < plane; ++i) gxr[i] += k * (gr[i] - mg - xh[i] * mgx);
            } else {
              for (int64_t i = 0; i < plane; ++i) gxr[i] += k * gr[i];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- resize / pool

Var Tape::bilinear_resize(Var x, int scale) {
  check(x, "bilinear_resize");
  if (scale < 1) throw ValueError("bilinear_resize: scale must be >= 1, got " +
                                  std::to_string(scale));
  const Tensor& in = val(x.id);
  require_4d(in, "bilinear_resize");
  int64_t B = in.extent(0), C = in.extent(1), H = in.extent(2), W = in.extent(3);
  int64_t OH = H * scale, OW = W * scale;
  ResizeTaps ty = make_taps(OH, H, scale);
  ResizeTaps tx = make_taps(OW, W, scale);
  Tensor out = Tensor::zeros({B, C, OH, OW});
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const double* ip = in.data() + (n * C + c) * H * W;
      double* op = out.data() + (n * C + c) * OH * OW;
      for (int64_t oy = 0; oy < OH; ++oy) {
        const double fy = ty.frac[static_cast<size_t>(oy)];
        const double* r0 = ip + ty.lo[static_cast<size_t>(oy)] * W;
        const double* r1 = ip + ty.hi[static_cast<size_t>(oy)] * W;
        double* orow = op + oy * OW;
        for (int64_t ox = 0; ox < OW; ++ox) {
          const double fx = tx.frac[static_cast<size_t>(ox)];
          const int64_t x0 = tx.lo[static_cast<size_t>(ox)], x1 = tx.hi[static_cast<size_t>(ox)];
          double top = (1.0 - fx) * r0[x0] + fx * r0[x1];
          double bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
          orow[ox] = (1.0 - fy) * top + fy * bot;
        }
      }
    }
  }
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id, ty = std::move(ty), tx = std::move(tx), B, C, H, W, OH,
                  OW](Tape& t) {
      const Tensor& g = t.gslot(yi);
      Tensor& gx = t.gslot(xi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          double* gp = gx.data() + (n * C + c) * H * W;
          const double* go = g.data() + (n * C + c) * OH * OW;
          for (int64_t oy = 0; oy < OH; ++oy) {
            const double fy = ty.frac[static_cast<size_t>(oy)];
            double* r0 = gp + ty.lo[static_cast<size_t>(oy)] * W;
            double* r1 = gp + ty.hi[static_cast<size_t>(oy)] * W;
            const double* grow = go + oy * OW;
            for (int64_t ox = 0; ox < OW; ++ox) {
              const double fx = tx.frac[static_cast<size_t>(ox)];
              const int64_t x0 = tx.lo[static_cast<size_t>(ox)],
                            x1 = tx.hi[static_cast<size_t>(ox)];
              const double gv = grow[ox];
              r0[x0] += (1.0 - fy) * (1.0 - fx) * gv;
              r0[x1] += (1.0 - fy) * fx * gv;
              r1[x0] += fy * (1.0 - fx) * gv;
              r1[x1] += fy * fx * gv;
            }
          }
        }
      }
    });
  }
  return y;
}

Var Tape::global_avg_pool(Var x) {
  check(x, "global_avg_pool");
  const Tensor& in = val(x.id);
  require_4d(in, "global_avg_pool");
  int64_t B = in.extent(0), C = in.extent(1), H = in.extent(2), W = in.extent(3);
  if (H < 1 || W < 1) throw ShapeError("global_avg_pool: empty spatial extent in " +
                                       in.shape_string());
  int64_t plane = H * W;
  Tensor out = Tensor::zeros({B, C, 1, 1});
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const double* p = in.data() + (n * C + c) * plane;
      double acc = 0.0;
      for (int64_t i = 0; i < plane; ++i) acc += p[i];
      out[n * C + c] = acc / static_cast<double>(plane);
    }
  }
  Var y = push(std::move(out), needs(x.id));
  if (needs(x.id)) {
    record(y.id, [xi = x.id, yi = y.id, B, C, plane](Tape& t) {
      const Tensor& g = t.gslot(yi);
      Tensor& gx = t.gslot(xi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          double gv = g[n * C + c] / static_cast<double>(plane);
          double* p = gx.data() + (n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) p[i] += gv;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- losses

Var Tape::softmax_cross_entropy(Var logits, const Tensor& labels, int64_t ignore_index,
                                bool* all_ignored) {
  check(logits, "softmax_cross_entropy");
  const Tensor& z = val(logits.id);
  require_4d(z, "softmax_cross_entropy");
  int64_t B = z.extent(0), K = z.extent(1), H = z.extent(2), W = z.extent(3);
  if (labels.rank() != 4 || labels.extent(0) != B || labels.extent(1) != 1 ||
      labels.extent(2) != H || labels.extent(3) != W)
    throw ShapeError("softmax_cross_entropy: labels " + labels.shape_string() +
                     " do not match logits " + z.shape_string());
  int64_t plane = H * W;
  // Per-pixel probabilities are kept for the backward pass.
  Tensor probs = Tensor::zeros(z.shape());
  double total = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      double lab = labels[n * plane + i];
      int64_t li = static_cast<int64_t>(lab);
      if (li == ignore_index) continue;
      if (li < 0 || li >= K || static_cast<double>(li) != lab)
        throw ValueError("softmax_cross_entropy: label " + std::to_string(lab) +
                         " outside [0," + std::to_string(K) + ")");
      double mx = z[(n * K) * plane + i];
      for (int64_t k = 1; k < K; ++k) mx = std::max(mx, z[(n * K + k) * plane + i]);
      double se = 0.0;
      for (int64_t k = 0; k < K; ++k) se += std::exp(z[(n * K + k) * plane + i] - mx);
      double lse = mx + std::log(se);
      for (int64_t k = 0; k < K; ++k)
        probs[(n * K + k) * plane + i] = std::exp(z[(n * K + k) * plane + i] - lse);
      total += lse - z[(n * K + li) * plane + i];
      ++count;
    }
  }
  if (all_ignored) *all_ignored = (count == 0);
  double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  Var y = push(Tensor::scalar(loss), needs(logits.id));
  if (needs(logits.id) && count > 0) {
    record(y.id, [zi = logits.id, yi = y.id, probs = std::move(probs), labels, ignore_index, B, K,
                  plane, count](Tape& t) {
      double g = t.gslot(yi)[0] / static_cast<double>(count);
      Tensor& gz = t.gslot(zi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t i = 0; i < plane; ++i) {
          int64_t li = static_cast<int64_t>(labels[n * plane + i]);
          if (li == ignore_index) continue;
          for (int64_t k = 0; k < K; ++k) {
            double p = probs[(n * K + k) * plane + i];
            gz[(n * K + k) * plane + i] += g * (p - (k == li ? 1.0 : 0.0));
          }
        }
      }
    });
  }
  return y;
}

namespace {

void require_mask(const Tensor& pred, const Tensor& target, const Tensor& mask, const char* who) {
  if (!pred.same_shape(target))
    throw ShapeError(std::string(who) + ": pred " + pred.shape_string() + " vs target " +
                     target.shape_string());
  if (mask.rank() != 4 || mask.extent(0) != pred.extent(0) || mask.extent(1) != 1 ||
      mask.extent(2) != pred.extent(2) || mask.extent(3) != pred.extent(3))
    throw ShapeError(std::string(who) + ": mask " + mask.shape_string() +
                     " does not match pred " + pred.shape_string());
}

}  // namespace

Var Tape::smooth_l1(Var pred, const Tensor& target, const Tensor& mask, bool* empty_mask) {
  check(pred, "smooth_l1");
  const Tensor& pv = val(pred.id);
  require_4d(pv, "smooth_l1");
  require_mask(pv, target, mask, "smooth_l1");
  int64_t B = pv.extent(0), C = pv.extent(1), plane = pv.extent(2) * pv.extent(3);
  double total = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t i = 0; i < plane; ++i) {
        if (mask[n * plane + i] == 0.0) continue;
        double d = pv[(n * C + c) * plane + i] - target[(n * C + c) * plane + i];
        double ad = std::abs(d);
        total += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
        ++count;
      }
    }
  }
  if (empty_mask) *empty_mask = (count == 0);
  double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  Var y = push(Tensor::scalar(loss), needs(pred.id));
  if (needs(pred.id) && count > 0) {
    record(y.id, [pi = pred.id, yi = y.id, target, mask, B, C, plane, count](Tape& t) {
      double g = t.gslot(yi)[0] / static_cast<double>(count);
      const Tensor& pv = t.val(pi);
      Tensor& gp = t.gslot(pi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          for (int64_t i = 0; i < plane; ++i) {
            if (mask[n * plane + i] == 0.0) continue;
            double d = pv[(n * C + c) * plane + i] - target[(n * C + c) * plane + i];
            gp[(n * C + c) * plane + i] += g * (std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0));
          }
        }
      }
    });
  }
  return y;
}

Var Tape::l1_masked(Var pred, const Tensor& target, const Tensor& mask) {
  check(pred, "l1_masked");
  const Tensor& pv = val(pred.id);
  require_4d(pv, "l1_masked");
  require_mask(pv, target, mask, "l1_masked");
  int64_t B = pv.extent(0), C = pv.extent(1), plane = pv.extent(2) * pv.extent(3);
  double total = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t i = 0; i < plane; ++i) {
        if (mask[n * plane + i] == 0.0) continue;
        total += std::abs(pv[(n * C + c) * plane + i] - target[(n * C + c) * plane + i]);
        ++count;
      }
    }
  }
  double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  Var y = push(Tensor::scalar(loss), needs(pred.id));
  if (needs(pred.id) && count > 0) {
    record(y.id, [pi = pred.id, yi = y.id, target, mask, B, C, plane, count](Tape& t) {
      double g = t.gslot(yi)[0] / static_cast<double>(count);
      const Tensor& pv = t.val(pi);
      Tensor& gp = t.gslot(pi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          for (int64_t i = 0; i < plane; ++i) {
            if (mask[n * plane + i] == 0.0) continue;
            double d = pv[(n * C + c) * plane + i] - target[(n * C + c) * plane + i];
            gp[(n * C + c) * plane + i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
          }
        }
      }
    });
  }
  return y;
}

Var Tape::focal_heatmap(Var logits, const Tensor& target) {
  check(logits, "focal_heatmap");
  const Tensor& z = val(logits.id);
  require_4d(z, "focal_heatmap");
  if (!z.same_shape(target))
    throw ShapeError("focal_heatmap: logits " + z.shape_string() + " vs target " +
                     target.shape_string());
  int64_t n_elems = z.numel();
  int64_t npos = 0;
  for (int64_t i = 0; i < n_elems; ++i) {
    double yv = target[i];
    if (yv < 0.0 || yv > 1.0)
      throw ValueError("focal_heatmap: target value " + std::to_string(yv) + " outside [0,1]");
    if (yv == 1.0) ++npos;
  }
  double norm = static_cast<double>(std::max<int64_t>(1, npos));
  double total = 0.0;
  for (int64_t i = 0; i < n_elems; ++i) {
    double zi = z[i];
    double p = stable_sigmoid(zi);
    double log_p = -softplus(-zi);
    double log_1mp = -softplus(zi);
    if (target[i] == 1.0) {
      total += (1.0 - p) * (1.0 - p) * log_p;
    } else {
      double w = std::pow(1.0 - target[i], 4.0);
      total += w * p * p * log_1mp;
    }
  }
  double loss = -total / norm;
  Var y = push(Tensor::scalar(loss), needs(logits.id));
  if (needs(logits.id)) {
    record(y.id, [zi_id = logits.id, yi = y.id, target, n_elems, norm](Tape& t) {
      double g = t.gslot(yi)[0] / norm;
      const Tensor& z = t.val(zi_id);
      Tensor& gz = t.gslot(zi_id);
      for (int64_t i = 0; i < n_elems; ++i) {
        double zi = z[i];
        double p = stable_sigmoid(zi);
        double log_p = -softplus(-zi);
        double log_1mp = -softplus(zi);
        double df;
        if (target[i] == 1.0) {
          // d/dz [(1-p)^2 log p] = -2 p (1-p)^2 log p + (1-p)^3
          df = -2.0 * p * (1.0 - p) * (1.0 - p) * log_p + (1.0 - p) * (1.0 - p) * (1.0 - p);
        } else {
          double w = std::pow(1.0 - target[i], 4.0);
          // d/dz [p^2 log(1-p)] = 2 p^2 (1-p) log(1-p) - p^3
          df = w * (2.0 * p * p * (1.0 - p) * log_1mp - p * p * p);
        }
        gz[i] += -g * df;
      }
    });
  }
  return y;
}

Var Tape::bin_cross_entropy(Var logits, const Tensor& bins, const Tensor& mask) {
  check(logits, "bin_cross_entropy");
  const Tensor& z = val(logits.id);
  require_4d(z, "bin_cross_entropy");
  int64_t B = z.extent(0), K = z.extent(1), plane = z.extent(2) * z.extent(3);
  if (bins.rank() != 4 || bins.extent(0) != B || bins.extent(1) != 1 ||
      bins.extent(2) != z.extent(2) || bins.extent(3) != z.extent(3))
    throw ShapeError("bin_cross_entropy: bins " + bins.shape_string() + " do not match logits " +
                     z.shape_string());
  if (!bins.same_shape(mask))
    throw ShapeError("bin_cross_entropy: mask " + mask.shape_string() + " vs bins " +
                     bins.shape_string());
  Tensor probs = Tensor::zeros(z.shape());
  double total = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      if (mask[n * plane + i] == 0.0) continue;
      int64_t bi = static_cast<int64_t>(bins[n * plane + i]);
      if (bi < 0 || bi >= K)
        throw ValueError("bin_cross_entropy: bin index " + std::to_string(bi) + " outside [0," +
                         std::to_string(K) + ")");
      double mx = z[(n * K) * plane + i];
      for (int64_t k = 1; k < K; ++k) mx = std::max(mx, z[(n * K + k) * plane + i]);
      double se = 0.0;
      for (int64_t k = 0; k < K; ++k) se += std::exp(z[(n * K + k) * plane + i] - mx);
      double lse = mx + std::log(se);
      for (int64_t k = 0; k < K; ++k)
        probs[(n * K + k) * plane + i] = std::exp(z[(n * K + k) * plane + i] - lse);
      total += lse - z[(n * K + bi) * plane + i];
      ++count;
    }
  }
  double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  Var y = push(Tensor::scalar(loss), needs(logits.id));
  if (needs(logits.id) && count > 0) {
    record(y.id, [zi = logits.id, yi = y.id, probs = std::move(probs), bins, mask, B, K, plane,
                  count](Tape& t) {
      double g = t.gslot(yi)[0] / static_cast<double>(count);
      Tensor& gz = t.gslot(zi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t i = 0; i < plane; ++i) {
          if (mask[n * plane + i] == 0.0) continue;
          int64_t bi = static_cast<int64_t>(bins[n * plane + i]);
          for (int64_t k = 0; k < K; ++k) {
            double p = probs[(n * K + k) * plane + i];
            gz[(n * K + k) * plane + i] += g * (p - (k == bi ? 1.0 : 0.0));
          }
        }
      }
    });
  }
  return y;
}

Var Tape::select_channel_l1(Var pred, const Tensor& bins, const Tensor& target,
                            const Tensor& mask) {
  check(pred, "select_channel_l1");
  const Tensor& pv = val(pred.id);
  require_4d(pv, "select_channel_l1");
  int64_t B = pv.extent(0), K = pv.extent(1), plane = pv.extent(2) * pv.extent(3);
  if (bins.rank() != 4 || bins.extent(0) != B || bins.extent(1) != 1 ||
      bins.extent(2) != pv.extent(2) || bins.extent(3) != pv.extent(3))
    throw ShapeError("select_channel_l1: bins " + bins.shape_string() + " do not match pred " +
                     pv.shape_string());
  if (!bins.same_shape(target) || !bins.same_shape(mask))
    throw ShapeError("select_channel_l1: target/mask shapes must match bins " +
                     bins.shape_string());
  double total = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t i = 0; i < plane; ++i) {
      if (mask[n * plane + i] == 0.0) continue;
      int64_t bi = static_cast<int64_t>(bins[n * plane + i]);
      if (bi < 0 || bi >= K)
        throw ValueError("select_channel_l1: bin index " + std::to_string(bi) + " outside [0," +
                         std::to_string(K) + ")");
      total += std::abs(pv[(n * K + bi) * plane + i] - target[n * plane + i]);
      ++count;
    }
  }
  double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  Var y = push(Tensor::scalar(loss), needs(pred.id));
  if (needs(pred.id) && count > 0) {
    record(y.id, [pi = pred.id, yi = y.id, bins, target, mask, B, K, plane, count](Tape& t) {
      double g = t.gslot(yi)[0] / static_cast<double>(count);
      const Tensor& pv = t.val(pi);
      Tensor& gp = t.gslot(pi);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t i = 0; i < plane; ++i) {
          if (mask[n * plane + i] == 0.0) continue;
          int64_t bi = static_cast<int64_t>(bins[n * plane + i]);
          double d = pv[(n * K + bi) * plane + i] - target[n * plane + i];
          gp[(n * K + bi) * plane + i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
      }
    });
  }
  return y;
}

}  // namespace mtnet
